//! Training data: a seeded synthetic image generator and a directory
//! loader, with deterministic splits and batch selection.
//!
//! Every image, split, and batch is a pure function of the run seed, so two
//! runs with the same config see byte-identical data in the same order.

use std::path::Path;

use candle_core::{Device, Tensor};

use crate::rng;
use crate::Result;

/// Flavor of generated imagery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticStyle {
    /// Gradients and solid shapes only.
    Smooth,
    /// Adds high-frequency stripes and pixel noise on top of the shapes.
    Textured,
}

/// In-memory dataset with fixed train/val/test index splits.
pub struct Dataset {
    data: Tensor,
    side: usize,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    test_idx: Vec<usize>,
}

fn u(r: &mut impl rand::RngCore) -> f32 {
    rng::uniform_open01(r) as f32
}

/// Renders one synthetic image into `buf` (3 planes, row-major).
fn render_image(buf: &mut [f32], side: usize, style: SyntheticStyle, rng: &mut impl rand::RngCore) {
    let plane = side * side;

    // Smooth two-corner gradient base per channel.
    let mut corners = [[0f32; 4]; 3];
    for c in corners.iter_mut() {
        for v in c.iter_mut() {
            *v = u(rng);
        }
    }
    for y in 0..side {
        let fy = y as f32 / (side - 1).max(1) as f32;
        for x in 0..side {
            let fx = x as f32 / (side - 1).max(1) as f32;
            for (ch, c) in corners.iter().enumerate() {
                let top = c[0] * (1.0 - fx) + c[1] * fx;
                let bot = c[2] * (1.0 - fx) + c[3] * fx;
                buf[ch * plane + y * side + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }

    // A few solid rectangles and disks.
    let n_shapes = 2 + (rng::uniform_open01(rng) * 3.0) as usize;
    for _ in 0..n_shapes {
        let color = [u(rng), u(rng), u(rng)];
        let cx = u(rng) * side as f32;
        let cy = u(rng) * side as f32;
        let half = (0.08 + 0.17 * u(rng)) * side as f32;
        let disk = rng::uniform_open01(rng) < 0.5;
        let x0 = (cx - half).max(0.0) as usize;
        let x1 = ((cx + half) as usize).min(side - 1);
        let y0 = (cy - half).max(0.0) as usize;
        let y1 = ((cy + half) as usize).min(side - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if disk {
                    let dx = x as f32 - cx;
                    let dy = y as f32 - cy;
                    if dx * dx + dy * dy > half * half {
                        continue;
                    }
                }
                for (ch, &col) in color.iter().enumerate() {
                    buf[ch * plane + y * side + x] = col;
                }
            }
        }
    }

    if style == SyntheticStyle::Textured {
        // Diagonal stripes plus uniform pixel noise.
        let freq = 2.0 + 6.0 * u(rng);
        let phase = u(rng) * std::f32::consts::TAU;
        let amp = 0.08 + 0.07 * u(rng);
        for y in 0..side {
            for x in 0..side {
                let s = amp * ((x + y) as f32 / side as f32 * freq * std::f32::consts::TAU + phase).sin();
                let n = (u(rng) - 0.5) * 0.12;
                for ch in 0..3 {
                    let idx = ch * plane + y * side + x;
                    buf[idx] = (buf[idx] + s + n).clamp(0.0, 1.0);
                }
            }
        }
    } else {
        for v in buf.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Generates `n` images of `side`x`side` pixels. Image `i` depends only on
/// `(seed, i)`, never on `n`.
pub fn generate_synthetic(
    n: usize,
    side: usize,
    style: SyntheticStyle,
    seed: u64,
    device: &Device,
) -> Result<Tensor> {
    if n == 0 {
        return Err(crate::Error::EmptyDataset("synthetic generator asked for 0 images".into()));
    }
    let plane = 3 * side * side;
    let mut flat = vec![0f32; n * plane];
    for (i, chunk) in flat.chunks_mut(plane).enumerate() {
        let mut r = rng::stream(seed, "synthetic-image", i as u64);
        render_image(chunk, side, style, &mut r);
    }
    Ok(Tensor::from_vec(flat, (n, 3, side, side), device)?)
}

/// Default train/val/test fractions.
pub const DEFAULT_SPLIT: [f64; 3] = [0.8, 0.1, 0.1];

fn split_indices(n: usize, seed: u64, split: [f64; 3]) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let mut r = rng::stream(seed, "dataset-split", 0);
    let perm = rng::permutation(&mut r, n);
    let n_val = ((split[1] * n as f64).round() as usize).max(1);
    let n_test = ((split[2] * n as f64).round() as usize).max(1);
    let n_train = n - n_val - n_test;
    let train = perm[..n_train].to_vec();
    let val = perm[n_train..n_train + n_val].to_vec();
    let test = perm[n_train + n_val..].to_vec();
    (train, val, test)
}

impl Dataset {
    /// Synthetic dataset with an 80/10/10 split.
    pub fn synthetic(
        n: usize,
        side: usize,
        style: SyntheticStyle,
        seed: u64,
        device: &Device,
    ) -> Result<Self> {
        Self::synthetic_with_split(n, side, style, seed, DEFAULT_SPLIT, device)
    }

    /// Synthetic dataset with explicit split fractions.
    pub fn synthetic_with_split(
        n: usize,
        side: usize,
        style: SyntheticStyle,
        seed: u64,
        split: [f64; 3],
        device: &Device,
    ) -> Result<Self> {
        if n < 3 {
            return Err(crate::Error::EmptyDataset(format!(
                "need at least 3 images to form splits, got {n}"
            )));
        }
        let data = generate_synthetic(n, side, style, seed, device)?;
        let (train_idx, val_idx, test_idx) = split_indices(n, seed, split);
        Ok(Self { data, side, train_idx, val_idx, test_idx })
    }

    /// Directory dataset with an 80/10/10 split; see
    /// [`Dataset::from_dir_with_split`].
    pub fn from_dir(dir: &Path, side: usize, seed: u64, device: &Device) -> Result<Self> {
        Self::from_dir_with_split(dir, side, seed, DEFAULT_SPLIT, device)
    }

    /// Loads every decodable image under `dir` (non-recursive, sorted by
    /// file name), bilinearly resized to `side`. Files that fail to decode
    /// are skipped with a warning on stderr.
    pub fn from_dir_with_split(
        dir: &Path,
        side: usize,
        seed: u64,
        split: [f64; 3],
        device: &Device,
    ) -> Result<Self> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        paths.sort();

        let plane = 3 * side * side;
        let mut flat: Vec<f32> = Vec::new();
        let mut kept = 0usize;
        for path in &paths {
            let img = match image::open(path) {
                Ok(img) => img,
                Err(e) => {
                    eprintln!("warning: skipping {}: {e}", path.display());
                    continue;
                }
            };
            let img = img
                .resize_exact(side as u32, side as u32, image::imageops::FilterType::Triangle)
                .to_rgb8();
            let offset = flat.len();
            flat.resize(offset + plane, 0.0);
            for (x, y, pixel) in img.enumerate_pixels() {
                let (x, y) = (x as usize, y as usize);
                for ch in 0..3 {
                    flat[offset + ch * side * side + y * side + x] =
                        pixel.0[ch] as f32 / 255.0;
                }
            }
            kept += 1;
        }
        if kept < 3 {
            return Err(crate::Error::EmptyDataset(format!(
                "directory {} yielded {kept} usable images; need at least 3",
                dir.display()
            )));
        }
        let data = Tensor::from_vec(flat, (kept, 3, side, side), device)?;
        let (train_idx, val_idx, test_idx) = split_indices(kept, seed, split);
        Ok(Self { data, side, train_idx, val_idx, test_idx })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.data.dims4().map(|(n, _, _, _)| n).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn train_len(&self) -> usize {
        self.train_idx.len()
    }

    pub fn val_len(&self) -> usize {
        self.val_idx.len()
    }

    pub fn test_len(&self) -> usize {
        self.test_idx.len()
    }

    fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let idx: Vec<u32> = indices.iter().map(|&i| i as u32).collect();
        let idx = Tensor::from_vec(idx, indices.len(), self.data.device())?;
        Ok(self.data.index_select(&idx, 0)?)
    }

    /// Training batch for a step: `batch` indices drawn with replacement
    /// from the train split, keyed by `(seed, step)`.
    pub fn train_batch(&self, seed: u64, step: u64, batch: usize) -> Result<Tensor> {
        let mut r = rng::stream(seed, "train-batch", step);
        let picks: Vec<usize> = (0..batch)
            .map(|_| {
                let u = rng::uniform_open01(&mut r);
                self.train_idx[(u * self.train_idx.len() as f64) as usize]
            })
            .collect();
        self.gather(&picks)
    }

    /// The whole validation split, in stored order.
    pub fn val_images(&self) -> Result<Tensor> {
        self.gather(&self.val_idx)
    }

    /// The whole test split, in stored order.
    pub fn test_images(&self) -> Result<Tensor> {
        self.gather(&self.test_idx)
    }

    /// Every image regardless of split, for evaluation-only pools.
    pub fn all_images(&self) -> &Tensor {
        &self.data
    }
}

/// Fresh random messages for a step: a `(batch, d_m)` 0/1 tensor keyed by
/// `(seed, step)`.
pub fn messages_for_step(
    seed: u64,
    step: u64,
    batch: usize,
    d_m: usize,
    device: &Device,
) -> Result<Tensor> {
    let mut r = rng::stream(seed, "train-messages", step);
    let flat: Vec<f32> = (0..batch * d_m)
        .map(|_| (rng::uniform_open01(&mut r) < 0.5) as u8 as f32)
        .collect();
    Ok(Tensor::from_vec(flat, (batch, d_m), device)?)
}
