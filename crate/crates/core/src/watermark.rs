//! Watermark embedder, extractor, and their losses.
//!
//! The embedder predicts a bounded residual conditioned on the message and
//! the cover image; the watermarked image is `clamp(x + alpha * r(x, m))`.
//! The scale `alpha` follows a cosine schedule during training: it starts
//! high so the extractor sees a strong signal, then decays to its final
//! value so the mark becomes subtle.

use candle_core::{Device, Tensor};
use rand_chacha::ChaCha12Rng;

use crate::color;
use crate::nn::{self, Conv2dLayer, LinearLayer, ParamStore};
use crate::rng;
use crate::Result;

/// Initial and final watermark scale of the decay schedule.
pub const ALPHA_START: f64 = 1.0;
pub const ALPHA_END: f64 = 0.2;
/// Fraction of training occupied by the decay window (the tail).
pub const ALPHA_DECAY_FRACTION: f64 = 0.4;

/// A single binary message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageBits {
    bits: Vec<u8>,
}

impl MessageBits {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(&b) = bits.iter().find(|&&b| b > 1) {
            return Err(crate::Error::DomainError(format!(
                "message bits must be 0 or 1, found {b}"
            )));
        }
        if bits.is_empty() {
            return Err(crate::Error::DomainError("empty message".into()));
        }
        Ok(Self { bits })
    }

    pub fn random(d_m: usize, rng: &mut ChaCha12Rng) -> Self {
        let bits = (0..d_m).map(|_| (rng::uniform_open01(rng) < 0.5) as u8).collect();
        Self { bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Stacks messages into a `(B, d_m)` float tensor.
    pub fn batch_tensor(messages: &[MessageBits], device: &Device) -> Result<Tensor> {
        let d_m = messages[0].len();
        for m in messages {
            if m.len() != d_m {
                return Err(crate::Error::LengthMismatch(d_m, m.len()));
            }
        }
        let flat: Vec<f32> = messages
            .iter()
            .flat_map(|m| m.bits.iter().map(|&b| b as f32))
            .collect();
        Ok(Tensor::from_vec(flat, (messages.len(), d_m), device)?)
    }
}

/// Residual encoder-decoder. The message enters at the half-resolution
/// bottleneck, broadcast over space, so every location can read every bit.
pub struct Embedder {
    stem: Conv2dLayer,
    res1a: Conv2dLayer,
    res1b: Conv2dLayer,
    down: Conv2dLayer,
    merge: Conv2dLayer,
    res2a: Conv2dLayer,
    res2b: Conv2dLayer,
    up: Conv2dLayer,
    out: Conv2dLayer,
    d_m: usize,
}

impl Embedder {
    pub fn new(
        store: &mut ParamStore,
        d_m: usize,
        width: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        let w = width;
        let w2 = width * 2;
        Ok(Self {
            stem: Conv2dLayer::new(store, "embedder.stem", 3, w, 3, 1, 1, rng)?,
            res1a: Conv2dLayer::new(store, "embedder.res1a", w, w, 3, 1, 1, rng)?,
            res1b: Conv2dLayer::new(store, "embedder.res1b", w, w, 3, 1, 1, rng)?,
            down: Conv2dLayer::new(store, "embedder.down", w, w2, 3, 2, 1, rng)?,
            merge: Conv2dLayer::new(store, "embedder.merge", w2 + d_m, w2, 3, 1, 1, rng)?,
            res2a: Conv2dLayer::new(store, "embedder.res2a", w2, w2, 3, 1, 1, rng)?,
            res2b: Conv2dLayer::new(store, "embedder.res2b", w2, w2, 3, 1, 1, rng)?,
            up: Conv2dLayer::new(store, "embedder.up", w2, w, 3, 1, 1, rng)?,
            out: Conv2dLayer::new(store, "embedder.out", w, 3, 3, 1, 1, rng)?,
            d_m,
        })
    }

    /// Residual `r(x, m)`, bounded to (-1, 1) by a final tanh.
    pub fn residual(&self, x: &Tensor, m: &Tensor) -> Result<Tensor> {
        let (b, _c, h, w) = x.dims4()?;
        let (mb, md) = m.dims2()?;
        if mb != b || md != self.d_m {
            return Err(crate::Error::PayloadMismatch { expected: self.d_m, got: md });
        }

        let s = self.stem.forward(x)?.relu()?;
        let r = self.res1b.forward(&self.res1a.forward(&s)?.relu()?)?;
        let s = (s + r)?.relu()?;
        let d = self.down.forward(&s)?.relu()?;

        let (_, _, h2, w2) = d.dims4()?;
        // Bits enter as +-1 so an absent bit pulls features the opposite
        // way from a present one.
        let m_signed = ((m * 2.0)? - 1.0)?;
        let m_plane = m_signed.reshape((b, self.d_m, 1, 1))?.broadcast_as((b, self.d_m, h2, w2))?;
        let d = Tensor::cat(&[&d, &m_plane.contiguous()?], 1)?;

        let d = self.merge.forward(&d)?.relu()?;
        let r = self.res2b.forward(&self.res2a.forward(&d)?.relu()?)?;
        let d = (d + r)?.relu()?;

        let u = d.upsample_nearest2d(h, w)?;
        let u = self.up.forward(&u)?.relu()?;
        Ok(self.out.forward(&u)?.tanh()?)
    }
}

/// Convolutional encoder ending in global pooling and a linear readout.
pub struct Extractor {
    b1: Conv2dLayer,
    b2: Conv2dLayer,
    b3: Conv2dLayer,
    b4: Conv2dLayer,
    head: LinearLayer,
}

impl Extractor {
    pub fn new(
        store: &mut ParamStore,
        d_m: usize,
        width: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        let w = width;
        Ok(Self {
            b1: Conv2dLayer::new(store, "extractor.b1", 3, w, 3, 2, 1, rng)?,
            b2: Conv2dLayer::new(store, "extractor.b2", w, w * 2, 3, 2, 1, rng)?,
            b3: Conv2dLayer::new(store, "extractor.b3", w * 2, w * 4, 3, 2, 1, rng)?,
            b4: Conv2dLayer::new(store, "extractor.b4", w * 4, w * 4, 3, 2, 1, rng)?,
            head: LinearLayer::new(store, "extractor.head", w * 4, d_m, rng)?,
        })
    }

    /// `(B, 3, H, W) -> (B, d_m)` real-valued per-bit scores.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.b1.forward(x)?.relu()?;
        let h = self.b2.forward(&h)?.relu()?;
        let h = self.b3.forward(&h)?.relu()?;
        let h = self.b4.forward(&h)?.relu()?;
        let (b, c, _hh, _ww) = h.dims4()?;
        let pooled = h.reshape((b, c, ()))?.mean(2)?;
        self.head.forward(&pooled)
    }
}

/// Embedder and extractor trained jointly. Forward passes are counted so
/// tests can assert the trainer reuses one graph per step.
pub struct WatermarkModel {
    pub embedder: Embedder,
    pub extractor: Extractor,
    d_m: usize,
    embed_calls: std::sync::atomic::AtomicUsize,
    extract_calls: std::sync::atomic::AtomicUsize,
}

impl WatermarkModel {
    pub fn new(
        store: &mut ParamStore,
        d_m: usize,
        width: usize,
        seed: u64,
        device: &Device,
    ) -> Result<Self> {
        let _ = device;
        let mut r = rng::stream(seed, "watermark-init", 0);
        Ok(Self {
            embedder: Embedder::new(store, d_m, width, &mut r)?,
            extractor: Extractor::new(store, d_m, width, &mut r)?,
            d_m,
            embed_calls: std::sync::atomic::AtomicUsize::new(0),
            extract_calls: std::sync::atomic::AtomicUsize::new(0),
        })
    }

    pub fn d_m(&self) -> usize {
        self.d_m
    }

    /// `(embed, extract)` forward-pass counts since construction.
    pub fn forward_counts(&self) -> (usize, usize) {
        (
            self.embed_calls.load(std::sync::atomic::Ordering::Relaxed),
            self.extract_calls.load(std::sync::atomic::Ordering::Relaxed),
        )
    }

    /// `clamp(x + alpha * r(x, m))`. With `alpha = 0` the output is the
    /// input, bit for bit.
    pub fn embed(&self, x: &Tensor, m: &Tensor, alpha: f64) -> Result<Tensor> {
        self.embed_calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        let r = self.embedder.residual(x, m)?;
        Ok((x + (r * alpha)?)?.clamp(0.0, 1.0)?)
    }

    /// See [`Extractor::forward`].
    pub fn extract(&self, x: &Tensor) -> Result<Tensor> {
        self.extract_calls.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.extractor.forward(x)
    }
}

/// Decodes scores into hard bits: `sigmoid(score) > 0.5`.
pub fn decode_bits(scores: &Tensor) -> Result<Vec<Vec<u8>>> {
    let probs = nn::sigmoid(scores)?;
    let rows: Vec<Vec<f32>> = probs.to_vec2()?;
    Ok(rows
        .iter()
        .map(|row| row.iter().map(|&p| (p > 0.5) as u8).collect())
        .collect())
}

/// Fraction of correctly decoded bits over the whole batch.
pub fn bit_accuracy(scores: &Tensor, m: &Tensor) -> Result<f64> {
    let decoded = decode_bits(scores)?;
    let truth: Vec<Vec<f32>> = m.to_vec2()?;
    if decoded.len() != truth.len() || decoded[0].len() != truth[0].len() {
        return Err(crate::Error::ShapeMismatch {
            expected: format!("({}, {})", truth.len(), truth[0].len()),
            got: format!("({}, {})", decoded.len(), decoded[0].len()),
        });
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for (d_row, t_row) in decoded.iter().zip(truth.iter()) {
        for (&d, &t) in d_row.iter().zip(t_row.iter()) {
            correct += (d == (t > 0.5) as u8) as usize;
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

/// Mean binary cross-entropy between `sigmoid(scores)` and the target bits,
/// in the numerically stable logit form
/// `m * softplus(-s) + (1 - m) * softplus(s)`.
pub fn message_loss(scores: &Tensor, m: &Tensor) -> Result<Tensor> {
    if scores.dims() != m.dims() {
        return Err(crate::Error::ShapeMismatch {
            expected: format!("{:?}", m.dims()),
            got: format!("{:?}", scores.dims()),
        });
    }
    let pos = (m * nn::softplus(&scores.neg()?)?)?;
    let one_minus_m = (m.neg()? + 1.0)?;
    let neg = (one_minus_m * nn::softplus(scores)?)?;
    Ok((pos + neg)?.mean_all()?)
}

/// Mean squared error between the two images in YUV space.
pub fn perceptual_loss(x: &Tensor, x_wm: &Tensor) -> Result<Tensor> {
    if x.dims() != x_wm.dims() {
        return Err(crate::Error::ShapeMismatch {
            expected: format!("{:?}", x.dims()),
            got: format!("{:?}", x_wm.dims()),
        });
    }
    let a = color::rgb_to_ycbcr(x)?;
    let b = color::rgb_to_ycbcr(x_wm)?;
    let d = (a - b)?;
    Ok((&d * &d)?.mean_all()?)
}

/// Watermark scale for a given epoch: flat at `ALPHA_START`, then cosine
/// decay to `ALPHA_END` across the final `ALPHA_DECAY_FRACTION` of epochs.
pub fn alpha_schedule(epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return ALPHA_START;
    }
    let decay_start = (1.0 - ALPHA_DECAY_FRACTION) * total_epochs as f64;
    let e = epoch as f64;
    if e <= decay_start {
        return ALPHA_START;
    }
    let t = ((e - decay_start) / (total_epochs as f64 - decay_start)).min(1.0);
    ALPHA_END + (ALPHA_START - ALPHA_END) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}
