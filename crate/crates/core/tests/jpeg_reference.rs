//! Agreement between the differentiable JPEG approximation and a real
//! baseline codec (encode with `jpeg-encoder`, decode with `image`).

use candle_core::{Device, Tensor};
use catmark::attacks::differentiable_jpeg;
use catmark::data::{generate_synthetic, SyntheticStyle};
use jpeg_encoder::{ColorType, Encoder, SamplingFactor};

/// Round-trips one `(1, 3, H, W)` image through the reference codec.
fn reference_jpeg(x: &Tensor, quality: u8) -> Tensor {
    let (_b, _c, h, w) = x.dims4().unwrap();
    let chw: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();
    let plane = h * w;
    let mut rgb = vec![0u8; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            rgb[3 * p + c] = (chw[c * plane + p] * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }

    let mut bytes = Vec::new();
    let mut encoder = Encoder::new(&mut bytes, quality);
    encoder.set_sampling_factor(SamplingFactor::F_2_2);
    encoder.encode(&rgb, w as u16, h as u16, ColorType::Rgb).unwrap();

    let decoded = image::load_from_memory(&bytes).unwrap().to_rgb8();
    assert_eq!((decoded.width(), decoded.height()), (w as u32, h as u32));
    let mut out = vec![0f32; 3 * plane];
    for (p, px) in decoded.pixels().enumerate() {
        for c in 0..3 {
            out[c * plane + p] = px.0[c] as f32 / 255.0;
        }
    }
    Tensor::from_vec(out, (1, 3, h, w), x.device()).unwrap()
}

fn mad(a: &Tensor, b: &Tensor) -> f32 {
    (a - b).unwrap().abs().unwrap().mean_all().unwrap().to_scalar().unwrap()
}

#[test]
fn matches_reference_codec_at_quality_80() {
    let dev = Device::Cpu;
    let pool = generate_synthetic(4, 48, SyntheticStyle::Textured, 91, &dev).unwrap();
    let mut worst = 0f32;
    for i in 0..4 {
        let x = pool.narrow(0, i, 1).unwrap();
        let ours = differentiable_jpeg(&x, 80).unwrap();
        let reference = reference_jpeg(&x, 80);
        let d = mad(&ours, &reference);
        worst = worst.max(d);
    }
    assert!(worst <= 0.03, "per-pixel MAD vs reference codec {worst} > 0.03");
}

#[test]
fn quality_scaling_tracks_the_reference() {
    let dev = Device::Cpu;
    let pool = generate_synthetic(2, 48, SyntheticStyle::Textured, 92, &dev).unwrap();
    let x = pool.narrow(0, 0, 1).unwrap();

    let ref80 = reference_jpeg(&x, 80);
    let at_match = mad(&differentiable_jpeg(&x, 80).unwrap(), &ref80);
    let at_mismatch = mad(&differentiable_jpeg(&x, 40).unwrap(), &ref80);
    assert!(
        at_mismatch > at_match,
        "quality 40 output should sit farther from a quality 80 decode \
         ({at_mismatch} vs {at_match})"
    );

    let ref40 = reference_jpeg(&x, 40);
    let d40 = mad(&differentiable_jpeg(&x, 40).unwrap(), &ref40);
    assert!(d40 <= 0.05, "per-pixel MAD vs reference codec at quality 40: {d40}");
}
