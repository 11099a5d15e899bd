//! Differentiable JPEG approximation.
//!
//! The pipeline mirrors a baseline JPEG encoder-decoder pair: BT.601 YCbCr,
//! 4:2:0 chroma subsampling, 8x8 block DCT, quality-scaled quantization
//! tables, dequantization, inverse DCT. The one non-differentiable step,
//! rounding to integer quantization levels, is replaced by the smooth
//! surrogate `v - sin(2*pi*v) / (2*pi)`, which agrees with hard rounding at
//! integers, stays within `1 / (2*pi)` of its input, and has gradient
//! `1 - cos(2*pi*v)`.

use candle_core::Tensor;

use crate::color;
use crate::Result;

/// Annex K luminance quantization table (row major).
const BASE_LUMA: [i32; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Annex K chrominance quantization table (row major).
const BASE_CHROMA: [i32; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

/// Scales an Annex K base table by `quality` using the libjpeg convention.
pub fn table_for_quality(base: &[i32; 64], quality: u32) -> [f32; 64] {
    let q = quality.clamp(1, 100) as i32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0f32; 64];
    for (o, &b) in out.iter_mut().zip(base.iter()) {
        *o = ((b * scale + 50) / 100).clamp(1, 255) as f32;
    }
    out
}

/// Smooth rounding surrogate: exact at integers, differentiable everywhere.
pub fn soft_round(v: &Tensor) -> Result<Tensor> {
    let tau = std::f64::consts::TAU;
    let scaled = (v * tau)?;
    Ok((v - (scaled.sin()? / tau)?)?)
}

/// Orthonormal 8x8 DCT-II matrix; with this normalization the coefficients
/// are on the scale the Annex K tables expect.
fn dct_matrix(device: &candle_core::Device) -> Result<Tensor> {
    let mut m = [0f32; 64];
    for k in 0..8 {
        let c = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for n in 0..8 {
            let angle = ((2 * n + 1) as f64 * k as f64 * std::f64::consts::PI) / 16.0;
            m[k * 8 + n] = (c * angle.cos()) as f32;
        }
    }
    Ok(Tensor::from_vec(m.to_vec(), (8, 8), device)?)
}

/// Extends dimension `dim` to `target` by repeating the last entry.
fn replicate_pad(x: &Tensor, dim: usize, target: usize) -> Result<Tensor> {
    let n = x.dims()[dim];
    if n == target {
        return Ok(x.clone());
    }
    let idx: Vec<u32> = (0..target).map(|i| i.min(n - 1) as u32).collect();
    let idx = Tensor::from_vec(idx, target, x.device())?;
    Ok(x.index_select(&idx, dim)?)
}

/// Quantizes one `(B, 1, H, W)` plane through the block DCT with the given
/// table, returning the reconstructed plane. Values are on the shifted
/// `[-128, 127]` scale.
fn code_plane(plane: &Tensor, table: &[f32; 64]) -> Result<Tensor> {
    let (b, _one, h, w) = plane.dims4()?;
    let dev = plane.device();
    let h8 = h.div_ceil(8) * 8;
    let w8 = w.div_ceil(8) * 8;
    let padded = replicate_pad(&replicate_pad(plane, 2, h8)?, 3, w8)?;
    let (nh, nw) = (h8 / 8, w8 / 8);
    let blocks = padded
        .reshape((b, nh, 8, nw, 8))?
        .permute((0, 1, 3, 2, 4))?
        .contiguous()?
        .reshape((b * nh * nw, 8, 8))?;

    let d = dct_matrix(dev)?;
    let dt = d.t()?.contiguous()?;
    // D * X * D^T via two right-multiplications.
    let a = blocks.broadcast_matmul(&dt)?;
    let coeffs = a.transpose(1, 2)?.contiguous()?.broadcast_matmul(&dt)?.transpose(1, 2)?.contiguous()?;

    let t = Tensor::from_vec(table.to_vec(), (8, 8), dev)?;
    let quantized = soft_round(&coeffs.broadcast_div(&t)?)?;
    let restored = quantized.broadcast_mul(&t)?;

    let a = restored.broadcast_matmul(&d)?;
    let pixels = a.transpose(1, 2)?.contiguous()?.broadcast_matmul(&d)?.transpose(1, 2)?.contiguous()?;

    let out = pixels
        .reshape((b, nh, nw, 8, 8))?
        .permute((0, 1, 3, 2, 4))?
        .contiguous()?
        .reshape((b, 1, h8, w8))?;
    Ok(out.narrow(2, 0, h)?.narrow(3, 0, w)?.contiguous()?)
}

/// Full codec with explicit tables; `differentiable_jpeg` wraps this with
/// quality-scaled Annex K tables.
pub fn jpeg_with_tables(x: &Tensor, luma_table: &[f32; 64], chroma_table: &[f32; 64]) -> Result<Tensor> {
    let (_b, c, h, w) = x.dims4()?;
    if c != 3 {
        return Err(crate::Error::ShapeMismatch {
            expected: "(B, 3, H, W)".into(),
            got: format!("{:?}", x.dims()),
        });
    }
    // Even spatial size so 4:2:0 pooling is well defined.
    let he = h + h % 2;
    let we = w + w % 2;
    let xp = replicate_pad(&replicate_pad(x, 2, he)?, 3, we)?;

    let ycbcr = ((color::rgb_to_ycbcr(&xp)? * 255.0)? - 128.0)?;
    let y = ycbcr.narrow(1, 0, 1)?.contiguous()?;
    let cb = ycbcr.narrow(1, 1, 1)?.contiguous()?.avg_pool2d(2)?;
    let cr = ycbcr.narrow(1, 2, 1)?.contiguous()?.avg_pool2d(2)?;

    let y = code_plane(&y, luma_table)?;
    let cb = code_plane(&cb, chroma_table)?.upsample_nearest2d(he, we)?;
    let cr = code_plane(&cr, chroma_table)?.upsample_nearest2d(he, we)?;

    let merged = Tensor::cat(&[&y, &cb, &cr], 1)?;
    let rgb = color::ycbcr_to_rgb(&((merged + 128.0)? / 255.0)?)?.clamp(0.0, 1.0)?;
    Ok(rgb.narrow(2, 0, h)?.narrow(3, 0, w)?.contiguous()?)
}

/// JPEG approximation at one of the supported integer qualities.
pub fn differentiable_jpeg(x: &Tensor, quality: u32) -> Result<Tensor> {
    let luma = table_for_quality(&BASE_LUMA, quality);
    let chroma = table_for_quality(&BASE_CHROMA, quality);
    jpeg_with_tables(x, &luma, &chroma)
}
