//! Color space transforms shared by the value attacks, the JPEG codec, and
//! the perceptual loss.
//!
//! All conversions use the BT.601 full-range YCbCr convention (the one JPEG
//! uses), with pixel values in `[0, 1]` and chroma centered at `0.5`. Keeping
//! a single matrix pair here means the perceptual loss and the compression
//! path measure color in the same basis.

use candle_core::Tensor;

use crate::Result;

/// BT.601 luma weights for R, G, B.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Forward RGB -> YCbCr matrix (rows produce Y, Cb, Cr).
const FWD: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168_735_892, -0.331_264_108, 0.5],
    [0.5, -0.418_687_589, -0.081_312_411],
];
const FWD_BIAS: [f64; 3] = [0.0, 0.5, 0.5];

/// Inverse YCbCr -> RGB matrix.
const INV: [[f64; 3]; 3] = [
    [1.0, 0.0, 1.402],
    [1.0, -0.344_136_286, -0.714_136_286],
    [1.0, 1.772, 0.0],
];

/// Applies `out = mat * pixel + bias` across the channel axis of a
/// `(B, 3, H, W)` tensor.
pub fn channel_affine(x: &Tensor, mat: &[[f64; 3]; 3], bias: &[f64; 3]) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c != 3 {
        return Err(crate::Error::ShapeMismatch {
            expected: "(B, 3, H, W)".into(),
            got: format!("{:?}", x.dims()),
        });
    }
    let dev = x.device();
    let flat: Vec<f32> = mat.iter().flatten().map(|&v| v as f32).collect();
    // (B, HW, 3) x (3, 3)^T puts the channel mix in a single matmul.
    let m = Tensor::from_vec(flat, (3, 3), dev)?.t()?;
    let bias_t = Tensor::from_vec(bias.iter().map(|&v| v as f32).collect::<Vec<f32>>(), 3, dev)?;
    let pixels = x.reshape((b, 3, h * w))?.transpose(1, 2)?;
    let mixed = pixels.broadcast_matmul(&m)?.broadcast_add(&bias_t)?;
    Ok(mixed.transpose(1, 2)?.reshape((b, 3, h, w))?)
}

/// RGB -> YCbCr, full range, chroma centered at 0.5.
pub fn rgb_to_ycbcr(x: &Tensor) -> Result<Tensor> {
    channel_affine(x, &FWD, &FWD_BIAS)
}

/// YCbCr -> RGB. Inverse of [`rgb_to_ycbcr`] up to float rounding.
pub fn ycbcr_to_rgb(x: &Tensor) -> Result<Tensor> {
    // rgb = INV * (ycbcr - fwd_bias), folded into one affine step.
    let bias = [
        -(INV[0][1] * 0.5 + INV[0][2] * 0.5),
        -(INV[1][1] * 0.5 + INV[1][2] * 0.5),
        -(INV[2][1] * 0.5 + INV[2][2] * 0.5),
    ];
    channel_affine(x, &INV, &bias)
}

/// BT.601 luma of an RGB batch, shape `(B, 1, H, W)`.
pub fn luma(x: &Tensor) -> Result<Tensor> {
    let r = x.narrow(1, 0, 1)?;
    let g = x.narrow(1, 1, 1)?;
    let b = x.narrow(1, 2, 1)?;
    Ok(((r * LUMA_WEIGHTS[0])? + (g * LUMA_WEIGHTS[1])? + (b * LUMA_WEIGHTS[2])?)?)
}

/// Composes two channel affines `g(f(x))` into a single `(mat, bias)` pair.
pub fn compose_affine(
    f_mat: &[[f64; 3]; 3],
    f_bias: &[f64; 3],
    g_mat: &[[f64; 3]; 3],
    g_bias: &[f64; 3],
) -> ([[f64; 3]; 3], [f64; 3]) {
    let mut mat = [[0.0; 3]; 3];
    let mut bias = [0.0; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                mat[i][j] += g_mat[i][k] * f_mat[k][j];
            }
            bias[i] += g_mat[i][j] * f_bias[j];
        }
        bias[i] += g_bias[i];
    }
    (mat, bias)
}

/// Single fused affine that rotates the chroma plane by `radians` around the
/// neutral point, expressed directly in RGB.
pub fn hue_rotation_affine(radians: f64) -> ([[f64; 3]; 3], [f64; 3]) {
    let (s, c) = radians.sin_cos();
    // Rotation acts on (Cb - 0.5, Cr - 0.5); Y passes through.
    let rot = [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]];
    let rot_bias = [0.0, 0.5 * (1.0 - c) + 0.5 * s, 0.5 * (1.0 - c) - 0.5 * s];
    let inv_bias = [
        -(INV[0][1] * 0.5 + INV[0][2] * 0.5),
        -(INV[1][1] * 0.5 + INV[1][2] * 0.5),
        -(INV[2][1] * 0.5 + INV[2][2] * 0.5),
    ];
    let (m1, b1) = compose_affine(&FWD, &FWD_BIAS, &rot, &rot_bias);
    compose_affine(&m1, &b1, &INV, &inv_bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn sample_batch() -> Tensor {
        let mut rng = crate::rng::stream(11, "color-test", 0);
        let vals: Vec<f32> = (0..2 * 3 * 8 * 8)
            .map(|_| crate::rng::uniform_open01(&mut rng) as f32)
            .collect();
        Tensor::from_vec(vals, (2, 3, 8, 8), &Device::Cpu).unwrap()
    }

    #[test]
    fn roundtrip_is_identity_within_1e5() {
        let x = sample_batch();
        let back = ycbcr_to_rgb(&rgb_to_ycbcr(&x).unwrap()).unwrap();
        let diff = (back - &x).unwrap().abs().unwrap().max_all().unwrap();
        let diff: f32 = diff.to_scalar().unwrap();
        assert!(diff <= 1e-5, "roundtrip error {diff}");
    }

    #[test]
    fn luma_matches_manual_weights() {
        let x = sample_batch();
        let y = luma(&x).unwrap();
        let xv: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
        let yv: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        // First image, pixel (0, 0): channels are HW apart.
        let manual = 0.299 * xv[0] + 0.587 * xv[64] + 0.114 * xv[128];
        assert!((yv[0] - manual).abs() < 1e-6);
    }

    #[test]
    fn ycbcr_of_gray_has_neutral_chroma() {
        let x = Tensor::full(0.25f32, (1, 3, 4, 4), &Device::Cpu).unwrap();
        let y = rgb_to_ycbcr(&x).unwrap();
        let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        for &cb in &v[16..32] {
            assert!((cb - 0.5).abs() < 1e-6);
        }
        for &cr in &v[32..48] {
            assert!((cr - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn hue_rotation_by_zero_is_identity() {
        // Tolerance set by the precision of the published matrix constants.
        let (mat, bias) = hue_rotation_affine(0.0);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((mat[i][j] - want).abs() < 1e-8);
            }
            assert!(bias[i].abs() < 1e-8);
        }
    }

    #[test]
    fn hue_rotation_preserves_luma() {
        let x = sample_batch();
        let (mat, bias) = hue_rotation_affine(1.3);
        let shifted = channel_affine(&x, &mat, &bias).unwrap();
        let y0 = luma(&x).unwrap();
        let y1 = luma(&shifted).unwrap();
        let diff = (y1 - y0).unwrap().abs().unwrap().max_all().unwrap();
        let diff: f32 = diff.to_scalar().unwrap();
        assert!(diff < 1e-5, "luma drift {diff}");
    }
}
