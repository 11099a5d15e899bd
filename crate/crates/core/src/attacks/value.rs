//! Photometric attacks: brightness, contrast, hue, grayscale.
//!
//! All four are affine in the pixel values (up to the final clamp), so their
//! gradients are exact and cheap.

use candle_core::Tensor;

use crate::color;
use crate::Result;

/// Scales all channels by `factor` and clamps. `factor == 1` returns the
/// input bit for bit (multiplication by one is exact, and the clamp is a
/// no-op on values already in `[0, 1]`).
pub fn brightness(x: &Tensor, factor: f64) -> Result<Tensor> {
    Ok((x * factor)?.clamp(0.0, 1.0)?)
}

/// Blends each image toward its own mean luma: `mu + factor * (x - mu)`.
pub fn contrast(x: &Tensor, factor: f64) -> Result<Tensor> {
    if factor == 1.0 {
        return Ok(x.clone());
    }
    let (b, _c, h, w) = x.dims4()?;
    // The mean couples every output pixel to every input pixel, and that
    // coupling is ~1e-7 per pixel; at single precision it would drown in
    // quantization. Blend in f64 and cast back once at the end.
    let x64 = x.to_dtype(candle_core::DType::F64)?;
    let mu = color::luma(&x64)?.reshape((b, h * w))?.mean_keepdim(1)?.reshape((b, 1, 1, 1))?;
    let centered = x64.broadcast_sub(&mu)?;
    let blended = (centered * factor)?.broadcast_add(&mu)?.clamp(0.0, 1.0)?;
    Ok(blended.to_dtype(candle_core::DType::F32)?)
}

/// Rotates the chroma plane by `shift` full turns (`shift` in `[-0.5, 0.5]`),
/// leaving luma untouched.
pub fn hue(x: &Tensor, shift: f64) -> Result<Tensor> {
    let (mat, bias) = color::hue_rotation_affine(shift * std::f64::consts::TAU);
    Ok(color::channel_affine(x, &mat, &bias)?.clamp(0.0, 1.0)?)
}

/// Replaces every channel with the BT.601 luma.
pub fn grayscale(x: &Tensor) -> Result<Tensor> {
    let y = color::luma(x)?;
    let (b, _c, h, w) = x.dims4()?;
    Ok(y.broadcast_as((b, 3, h, w))?.contiguous()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn batch() -> Tensor {
        let mut rng = crate::rng::stream(9, "value-test", 0);
        let vals: Vec<f32> = (0..2 * 3 * 8 * 8)
            .map(|_| crate::rng::uniform_open01(&mut rng) as f32)
            .collect();
        Tensor::from_vec(vals, (2, 3, 8, 8), &Device::Cpu).unwrap()
    }

    fn bits(t: &Tensor) -> Vec<u32> {
        t.flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap()
            .iter()
            .map(|v| v.to_bits())
            .collect()
    }

    #[test]
    fn brightness_one_is_bit_exact() {
        let x = batch();
        assert_eq!(bits(&x), bits(&brightness(&x, 1.0).unwrap()));
    }

    #[test]
    fn brightness_zero_is_black() {
        let x = batch();
        let y = brightness(&x, 0.0).unwrap();
        let m: f32 = y.abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert_eq!(m, 0.0);
    }

    #[test]
    fn contrast_one_is_identity() {
        let x = batch();
        assert_eq!(bits(&x), bits(&contrast(&x, 1.0).unwrap()));
    }

    #[test]
    fn contrast_zero_flattens_to_mean_luma() {
        let x = batch();
        let y = contrast(&x, 0.0).unwrap();
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        let first = v[0];
        let per_image = 3 * 8 * 8;
        assert!(v[..per_image].iter().all(|&p| (p - first).abs() < 1e-6));
    }

    #[test]
    fn grayscale_is_idempotent() {
        let x = batch();
        let g1 = grayscale(&x).unwrap();
        let g2 = grayscale(&g1).unwrap();
        let d: f32 = (g2 - &g1).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(d < 1e-6);
        // All three channels equal.
        let r = g1.narrow(1, 0, 1).unwrap();
        let b = g1.narrow(1, 2, 1).unwrap();
        let d: f32 = (r - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert_eq!(d, 0.0);
    }

    /// Low-saturation batch: hue rotations keep these pixels inside the RGB
    /// gamut, so the clamp stays inactive.
    fn pastel_batch() -> Tensor {
        let mut rng = crate::rng::stream(10, "value-test-pastel", 0);
        let vals: Vec<f32> = (0..2 * 3 * 8 * 8)
            .map(|_| (0.4 + 0.2 * crate::rng::uniform_open01(&mut rng)) as f32)
            .collect();
        Tensor::from_vec(vals, (2, 3, 8, 8), &Device::Cpu).unwrap()
    }

    #[test]
    fn hue_full_turn_returns_close_to_input() {
        let x = pastel_batch();
        let y = hue(&x, 0.5).unwrap();
        let y = hue(&y, 0.5).unwrap();
        let d: f32 = (y - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(d < 1e-4, "full-turn drift {d}");
    }

    #[test]
    fn hue_clamps_out_of_gamut_rotations() {
        // Saturated colors leave the gamut under large hue shifts; the
        // output must still be a valid image.
        let x = batch();
        let y = hue(&x, 0.5).unwrap();
        let max: f32 = y.max_all().unwrap().to_scalar().unwrap();
        let min: f32 = y.min_all().unwrap().to_scalar().unwrap();
        assert!((0.0..=1.0).contains(&min) && (0.0..=1.0).contains(&max));
    }

    #[test]
    fn hue_changes_chroma_but_not_luma() {
        let x = pastel_batch();
        let y = hue(&x, 0.25).unwrap();
        let l0 = crate::color::luma(&x).unwrap();
        let l1 = crate::color::luma(&y).unwrap();
        let dl: f32 = (l1 - l0).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(dl < 1e-4);
        let dx: f32 = (y - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(dx > 1e-2, "hue shift had no visible effect");
    }
}
