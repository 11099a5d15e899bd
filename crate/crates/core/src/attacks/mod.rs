//! Differentiable attack library.
//!
//! Twelve primitives grouped in four families: geometric warps (rotate,
//! resize, crop, perspective, horizontal flip), photometric value changes
//! (brightness, contrast, hue, grayscale), compression-style degradations
//! (gaussian blur, JPEG), and the identity. Every primitive preserves the
//! input shape, stays in `[0, 1]`, and is differentiable with respect to
//! pixel values; that is what lets an attack policy backpropagate through
//! whole attack chains.
//!
//! Parameters are sampled uniformly from each primitive's bounded range and
//! are not themselves learned; gradients flow only through the image path.

mod blur;
mod jpeg;
mod value;
mod warp;

pub use jpeg::{differentiable_jpeg, jpeg_with_tables, soft_round, table_for_quality};

use rand_chacha::ChaCha12Rng;

use candle_core::Tensor;

use crate::image_batch::{ColorSpace, ImageBatch};
use crate::rng;
use crate::{Error, Result};

/// The attack kinds, in registry order. Identity sits last so that policy
/// logits index attacks first and the do-nothing arm is always slot `K - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    Rotate,
    Resize,
    Crop,
    Perspective,
    Hflip,
    Brightness,
    Contrast,
    Hue,
    Grayscale,
    GaussianBlur,
    Jpeg,
    Identity,
}

/// Attack families used for grouped reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Family {
    Geometric,
    Value,
    Compression,
    Identity,
}

impl Family {
    /// Short label used in reports and aggregate keys.
    pub fn label(self) -> &'static str {
        match self {
            Family::Geometric => "Geom",
            Family::Value => "Val",
            Family::Compression => "Comp",
            Family::Identity => "Id",
        }
    }
}

/// Valid parameter range of one primitive.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamRange {
    /// Closed interval, sampled uniformly.
    Continuous { lo: f64, hi: f64 },
    /// Sorted value set, sampled uniformly. Binary toggles use `[0, 1]`.
    Discrete(&'static [f64]),
}

impl ParamRange {
    /// Whether `value` is a valid parameter under this range.
    pub fn contains(&self, value: f64) -> bool {
        match *self {
            ParamRange::Continuous { lo, hi } => value.is_finite() && value >= lo && value <= hi,
            ParamRange::Discrete(set) => set.iter().any(|&v| v == value),
        }
    }
}

/// One registry entry: identity of the attack plus its parameter space.
#[derive(Debug, Clone)]
pub struct AttackPrimitive {
    pub id: &'static str,
    pub kind: Primitive,
    pub family: Family,
    pub range: ParamRange,
    /// Human-readable unit of the range values.
    pub unit: &'static str,
}

const REGISTRY: [AttackPrimitive; 12] = [
    AttackPrimitive {
        id: "rotate",
        kind: Primitive::Rotate,
        family: Family::Geometric,
        range: ParamRange::Continuous { lo: -90.0, hi: 90.0 },
        unit: "degrees",
    },
    AttackPrimitive {
        id: "resize",
        kind: Primitive::Resize,
        family: Family::Geometric,
        range: ParamRange::Continuous { lo: 0.32, hi: 1.0 },
        unit: "scale fraction",
    },
    AttackPrimitive {
        id: "crop",
        kind: Primitive::Crop,
        family: Family::Geometric,
        range: ParamRange::Continuous { lo: 0.32, hi: 1.0 },
        unit: "area fraction",
    },
    AttackPrimitive {
        id: "perspective",
        kind: Primitive::Perspective,
        family: Family::Geometric,
        range: ParamRange::Continuous { lo: 0.0, hi: 0.8 },
        unit: "distortion fraction",
    },
    AttackPrimitive {
        id: "hflip",
        kind: Primitive::Hflip,
        family: Family::Geometric,
        range: ParamRange::Discrete(&[0.0, 1.0]),
        unit: "toggle",
    },
    AttackPrimitive {
        id: "brightness",
        kind: Primitive::Brightness,
        family: Family::Value,
        range: ParamRange::Continuous { lo: 0.1, hi: 2.0 },
        unit: "factor",
    },
    AttackPrimitive {
        id: "contrast",
        kind: Primitive::Contrast,
        family: Family::Value,
        range: ParamRange::Continuous { lo: 0.1, hi: 2.0 },
        unit: "factor",
    },
    AttackPrimitive {
        id: "hue",
        kind: Primitive::Hue,
        family: Family::Value,
        range: ParamRange::Continuous { lo: -0.5, hi: 0.5 },
        unit: "turns",
    },
    AttackPrimitive {
        id: "grayscale",
        kind: Primitive::Grayscale,
        family: Family::Value,
        range: ParamRange::Discrete(&[0.0, 1.0]),
        unit: "toggle",
    },
    AttackPrimitive {
        id: "gaussian_blur",
        kind: Primitive::GaussianBlur,
        family: Family::Compression,
        range: ParamRange::Discrete(&[3.0, 5.0, 9.0, 13.0, 17.0]),
        unit: "kernel px",
    },
    AttackPrimitive {
        id: "jpeg",
        kind: Primitive::Jpeg,
        family: Family::Compression,
        range: ParamRange::Discrete(&[40.0, 50.0, 60.0, 70.0, 80.0, 90.0]),
        unit: "quality",
    },
    AttackPrimitive {
        id: "identity",
        kind: Primitive::Identity,
        family: Family::Identity,
        range: ParamRange::Discrete(&[0.0]),
        unit: "none",
    },
];

/// Number of primitives, including identity.
pub const NUM_PRIMITIVES: usize = REGISTRY.len();

/// The full attack registry in stable order (identity last).
pub fn registry() -> &'static [AttackPrimitive] {
    &REGISTRY
}

/// Looks up a primitive by its registry id.
pub fn by_id(id: &str) -> Result<&'static AttackPrimitive> {
    REGISTRY
        .iter()
        .find(|p| p.id == id)
        .ok_or_else(|| crate::Error::UnknownPrimitive(id.to_string()))
}

impl Primitive {
    /// Index of this primitive in the registry.
    pub fn index(self) -> usize {
        REGISTRY.iter().position(|p| p.kind == self).unwrap()
    }

    /// Registry entry for this primitive.
    pub fn info(self) -> &'static AttackPrimitive {
        &REGISTRY[self.index()]
    }
}

/// Fully instantiated attack parameters, including any auxiliary randomness
/// (crop offsets, perspective corner draws) so application is a pure
/// function.
#[derive(Debug, Clone, PartialEq)]
pub enum AttackParams {
    Identity,
    Rotate { degrees: f64 },
    Resize { scale: f64 },
    Crop { area: f64, ox: f64, oy: f64 },
    Perspective { scale: f64, corners: [f64; 8] },
    Hflip { on: bool },
    Brightness { factor: f64 },
    Contrast { factor: f64 },
    Hue { shift: f64 },
    Grayscale { on: bool },
    Blur { kernel_px: usize },
    Jpeg { quality: u32 },
}

impl AttackParams {
    /// Which primitive these parameters belong to.
    pub fn primitive(&self) -> Primitive {
        match self {
            AttackParams::Identity => Primitive::Identity,
            AttackParams::Rotate { .. } => Primitive::Rotate,
            AttackParams::Resize { .. } => Primitive::Resize,
            AttackParams::Crop { .. } => Primitive::Crop,
            AttackParams::Perspective { .. } => Primitive::Perspective,
            AttackParams::Hflip { .. } => Primitive::Hflip,
            AttackParams::Brightness { .. } => Primitive::Brightness,
            AttackParams::Contrast { .. } => Primitive::Contrast,
            AttackParams::Hue { .. } => Primitive::Hue,
            AttackParams::Grayscale { .. } => Primitive::Grayscale,
            AttackParams::Blur { .. } => Primitive::GaussianBlur,
            AttackParams::Jpeg { .. } => Primitive::Jpeg,
        }
    }

    /// The scalar strength (grid value) these params encode, for logging.
    pub fn strength(&self) -> f64 {
        match *self {
            AttackParams::Identity => 0.0,
            AttackParams::Rotate { degrees } => degrees,
            AttackParams::Resize { scale } => scale,
            AttackParams::Crop { area, .. } => area,
            AttackParams::Perspective { scale, .. } => scale,
            AttackParams::Hflip { on } => on as u8 as f64,
            AttackParams::Brightness { factor } => factor,
            AttackParams::Contrast { factor } => factor,
            AttackParams::Hue { shift } => shift,
            AttackParams::Grayscale { on } => on as u8 as f64,
            AttackParams::Blur { kernel_px } => kernel_px as f64,
            AttackParams::Jpeg { quality } => quality as f64,
        }
    }
}

fn uniform_in(rng: &mut ChaCha12Rng, lo: f64, hi: f64) -> f64 {
    lo + rng::uniform_open01(rng) * (hi - lo)
}

fn pick(rng: &mut ChaCha12Rng, values: &[f64]) -> f64 {
    let i = (rng::uniform_open01(rng) * values.len() as f64) as usize;
    values[i.min(values.len() - 1)]
}

/// Draws parameters uniformly from the primitive's range. Binary toggles
/// come back "on": selecting the primitive means applying it, the "off"
/// branch is what the identity arm is for.
pub fn sample_params(primitive: Primitive, rng: &mut ChaCha12Rng) -> AttackParams {
    let info = primitive.info();
    match primitive {
        Primitive::Identity => AttackParams::Identity,
        Primitive::Hflip => AttackParams::Hflip { on: true },
        Primitive::Grayscale => AttackParams::Grayscale { on: true },
        Primitive::Rotate => {
            let ParamRange::Continuous { lo, hi } = info.range else { unreachable!() };
            AttackParams::Rotate { degrees: uniform_in(rng, lo, hi) }
        }
        Primitive::Resize => {
            let ParamRange::Continuous { lo, hi } = info.range else { unreachable!() };
            AttackParams::Resize { scale: uniform_in(rng, lo, hi) }
        }
        Primitive::Crop => {
            let ParamRange::Continuous { lo, hi } = info.range else { unreachable!() };
            let area = uniform_in(rng, lo, hi);
            AttackParams::Crop {
                area,
                ox: rng::uniform_open01(rng),
                oy: rng::uniform_open01(rng),
            }
        }
        Primitive::Perspective => {
            let ParamRange::Continuous { lo, hi } = info.range else { unreachable!() };
            let scale = uniform_in(rng, lo, hi);
            let mut corners = [0.0; 8];
            for c in corners.iter_mut() {
                *c = rng::uniform_open01(rng);
            }
            AttackParams::Perspective { scale, corners }
        }
        Primitive::Brightness => {
            let ParamRange::Continuous { lo, hi } = info.range else { unreachable!() };
            AttackParams::Brightness { factor: uniform_in(rng, lo, hi) }
        }
        Primitive::Contrast => {
            let ParamRange::Continuous { lo, hi } = info.range else { unreachable!() };
            AttackParams::Contrast { factor: uniform_in(rng, lo, hi) }
        }
        Primitive::Hue => {
            let ParamRange::Continuous { lo, hi } = info.range else { unreachable!() };
            AttackParams::Hue { shift: uniform_in(rng, lo, hi) }
        }
        Primitive::GaussianBlur => {
            let ParamRange::Discrete(v) = info.range else { unreachable!() };
            AttackParams::Blur { kernel_px: pick(rng, v) as usize }
        }
        Primitive::Jpeg => {
            let ParamRange::Discrete(v) = info.range else { unreachable!() };
            AttackParams::Jpeg { quality: pick(rng, v) as u32 }
        }
    }
}

/// Instantiates parameters for one evaluation-grid cell: `value` is the grid
/// strength, `rng` supplies any auxiliary randomness (crop offset,
/// perspective corners).
pub fn params_for_grid(
    primitive: Primitive,
    value: f64,
    rng: &mut ChaCha12Rng,
) -> Result<AttackParams> {
    let params = match primitive {
        Primitive::Identity => AttackParams::Identity,
        Primitive::Rotate => AttackParams::Rotate { degrees: value },
        Primitive::Resize => AttackParams::Resize { scale: value },
        Primitive::Crop => AttackParams::Crop {
            area: value,
            ox: rng::uniform_open01(rng),
            oy: rng::uniform_open01(rng),
        },
        Primitive::Perspective => {
            let mut corners = [0.0; 8];
            for c in corners.iter_mut() {
                *c = rng::uniform_open01(rng);
            }
            AttackParams::Perspective { scale: value, corners }
        }
        Primitive::Hflip => AttackParams::Hflip { on: value >= 0.5 },
        Primitive::Brightness => AttackParams::Brightness { factor: value },
        Primitive::Contrast => AttackParams::Contrast { factor: value },
        Primitive::Hue => AttackParams::Hue { shift: value },
        Primitive::Grayscale => AttackParams::Grayscale { on: value >= 0.5 },
        Primitive::GaussianBlur => AttackParams::Blur { kernel_px: value as usize },
        Primitive::Jpeg => AttackParams::Jpeg { quality: value.round() as u32 },
    };
    validate_params(&params)?;
    Ok(params)
}

fn range_err(primitive: &'static str, value: f64, range: String) -> crate::Error {
    crate::Error::OutOfRangeParam { primitive, value, range }
}

/// Checks parameters against the primitive's valid range.
pub fn validate_params(params: &AttackParams) -> Result<()> {
    let info = params.primitive().info();
    let check_interval = |value: f64| -> Result<()> {
        let ParamRange::Continuous { lo, hi } = info.range else { unreachable!() };
        if value < lo || value > hi || !value.is_finite() {
            return Err(range_err(info.id, value, format!("[{lo}, {hi}] {}", info.unit)));
        }
        Ok(())
    };
    match *params {
        AttackParams::Identity
        | AttackParams::Hflip { .. }
        | AttackParams::Grayscale { .. } => Ok(()),
        AttackParams::Rotate { degrees } => check_interval(degrees),
        AttackParams::Resize { scale } => check_interval(scale),
        AttackParams::Brightness { factor } | AttackParams::Contrast { factor } => {
            check_interval(factor)
        }
        AttackParams::Hue { shift } => check_interval(shift),
        AttackParams::Crop { area, ox, oy } => {
            check_interval(area)?;
            for aux in [ox, oy] {
                if !(0.0..=1.0).contains(&aux) {
                    return Err(range_err(info.id, aux, "[0, 1] offset fraction".into()));
                }
            }
            Ok(())
        }
        AttackParams::Perspective { scale, corners } => {
            check_interval(scale)?;
            for c in corners {
                if !(0.0..=1.0).contains(&c) {
                    return Err(range_err(info.id, c, "[0, 1] corner fraction".into()));
                }
            }
            Ok(())
        }
        AttackParams::Blur { kernel_px } => {
            let ParamRange::Discrete(v) = info.range else { unreachable!() };
            if v.contains(&(kernel_px as f64)) {
                Ok(())
            } else {
                Err(range_err(info.id, kernel_px as f64, format!("{v:?} {}", info.unit)))
            }
        }
        AttackParams::Jpeg { quality } => {
            let ParamRange::Discrete(v) = info.range else { unreachable!() };
            if v.contains(&(quality as f64)) {
                Ok(())
            } else {
                Err(range_err(info.id, quality as f64, format!("{v:?} {}", info.unit)))
            }
        }
    }
}

/// Applies an attack to a raw `(B, 3, H, W)` tensor in `[0, 1]` RGB.
///
/// Identity, unit brightness, and the "off" toggle branches return the input
/// unchanged, bit for bit.
pub fn apply_tensor(x: &Tensor, params: &AttackParams) -> Result<Tensor> {
    validate_params(params)?;
    let (_b, _c, h, w) = x.dims4()?;
    let dev = x.device();
    match *params {
        AttackParams::Identity => Ok(x.clone()),
        AttackParams::Rotate { degrees } => warp::rotate_plan(h, w, degrees, dev)?.apply(x),
        AttackParams::Resize { scale } => {
            let (down, up, _, _) = warp::resize_plans(h, w, scale, dev)?;
            up.apply(&down.apply(x)?)
        }
        AttackParams::Crop { area, ox, oy } => warp::crop_plan(h, w, area, ox, oy, dev)?.apply(x),
        AttackParams::Perspective { scale, corners } => {
            warp::perspective_plan(h, w, scale, &corners, dev)?.apply(x)
        }
        AttackParams::Hflip { on } => {
            if on {
                warp::hflip_plan(h, w, dev)?.apply(x)
            } else {
                Ok(x.clone())
            }
        }
        AttackParams::Brightness { factor } => {
            if factor == 1.0 {
                Ok(x.clone())
            } else {
                value::brightness(x, factor)
            }
        }
        AttackParams::Contrast { factor } => value::contrast(x, factor),
        AttackParams::Hue { shift } => value::hue(x, shift),
        AttackParams::Grayscale { on } => {
            if on {
                value::grayscale(x)
            } else {
                Ok(x.clone())
            }
        }
        AttackParams::Blur { kernel_px } => blur::gaussian_blur(x, kernel_px),
        AttackParams::Jpeg { quality } => jpeg::differentiable_jpeg(x, quality),
    }
}

/// Applies `params[arms[i]]` to element `i`: elements are grouped by arm,
/// each group is attacked in one call, and the results are scattered back
/// into the original order.
pub fn apply_arms(x: &Tensor, arms: &[usize], params: &[AttackParams]) -> Result<Tensor> {
    let (b, _c, _h, _w) = x.dims4()?;
    if arms.len() != b {
        return Err(Error::LengthMismatch(arms.len(), b));
    }
    let dev = x.device();
    let mut parts: Vec<Tensor> = Vec::new();
    let mut positions: Vec<u32> = Vec::new();
    for (arm, p) in params.iter().enumerate() {
        let members: Vec<u32> = arms
            .iter()
            .enumerate()
            .filter(|&(_, &a)| a == arm)
            .map(|(i, _)| i as u32)
            .collect();
        if members.is_empty() {
            continue;
        }
        let idx = Tensor::from_vec(members.clone(), members.len(), dev)?;
        parts.push(apply_tensor(&x.index_select(&idx, 0)?, p)?);
        positions.extend(members);
    }
    let stacked = Tensor::cat(&parts, 0)?;
    let mut inverse = vec![0u32; b];
    for (pos, &orig) in positions.iter().enumerate() {
        inverse[orig as usize] = pos as u32;
    }
    Ok(stacked.index_select(&Tensor::from_vec(inverse, b, dev)?, 0)?)
}

/// Applies an attack to an [`ImageBatch`], preserving shape and color space.
pub fn apply(x: &ImageBatch, params: &AttackParams) -> Result<ImageBatch> {
    if x.color_space != ColorSpace::Rgb {
        return Err(crate::Error::DomainError(
            "attacks operate on RGB batches".into(),
        ));
    }
    Ok(ImageBatch::from_tensor(
        apply_tensor(&x.data, params)?,
        ColorSpace::Rgb,
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use proptest::prelude::*;

    fn batch(b: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = rng::stream(seed, "attacks-test", 0);
        // Values kept off the clamp boundaries so perturbed pixels stay
        // inside [0, 1].
        let vals: Vec<f32> = (0..b * 3 * h * w)
            .map(|_| (0.05 + 0.9 * rng::uniform_open01(&mut rng)) as f32)
            .collect();
        Tensor::from_vec(vals, (b, 3, h, w), &Device::Cpu).unwrap()
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
    fn registry_shape_and_order() {
        let reg = registry();
        assert_eq!(reg.len(), 12);
        assert_eq!(reg.last().unwrap().kind, Primitive::Identity);
        let mut ids: Vec<&str> = reg.iter().map(|p| p.id).collect();
        assert_eq!(
            ids,
            vec![
                "rotate",
                "resize",
                "crop",
                "perspective",
                "hflip",
                "brightness",
                "contrast",
                "hue",
                "grayscale",
                "gaussian_blur",
                "jpeg",
                "identity"
            ]
        );
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 12, "ids must be unique");
    }

    #[test]
    fn registry_family_counts() {
        let count = |f: Family| registry().iter().filter(|p| p.family == f).count();
        assert_eq!(count(Family::Identity), 1);
        assert_eq!(count(Family::Value), 4);
        assert_eq!(count(Family::Compression), 2);
        assert_eq!(count(Family::Geometric), 5);
    }

    #[test]
    fn registry_ranges_are_well_formed() {
        for p in registry() {
            match &p.range {
                ParamRange::Continuous { lo, hi } => assert!(lo < hi, "{}", p.id),
                ParamRange::Discrete(v) => {
                    assert!(!v.is_empty(), "{}", p.id);
                    assert!(v.windows(2).all(|w| w[0] < w[1]), "{} not sorted", p.id);
                }
            }
            if matches!(p.kind, Primitive::Hflip | Primitive::Grayscale) {
                assert_eq!(p.range, ParamRange::Discrete(&[0.0, 1.0]));
            }
        }
    }

    #[test]
    fn sampled_params_stay_in_range() {
        let mut rng = rng::stream(7, "sample-range", 0);
        for p in registry() {
            for _ in 0..200 {
                let params = sample_params(p.kind, &mut rng);
                validate_params(&params).unwrap();
                if let ParamRange::Continuous { lo, hi } = p.range {
                    let v = params.strength();
                    assert!(v >= lo && v <= hi, "{} out of range: {v}", p.id);
                }
            }
        }
    }

    #[test]
    fn jpeg_quality_sampling_is_uniform() {
        let mut rng = rng::stream(123, "chi", 0);
        let qualities = [40u32, 50, 60, 70, 80, 90];
        let mut counts = [0u32; 6];
        let n = 100_000;
        for _ in 0..n {
            let AttackParams::Jpeg { quality } = sample_params(Primitive::Jpeg, &mut rng) else {
                unreachable!()
            };
            counts[qualities.iter().position(|&q| q == quality).unwrap()] += 1;
        }
        // sigma for a binomial(n, 1/6) count.
        let expected = n as f64 / 6.0;
        let sigma = (n as f64 * (1.0 / 6.0) * (5.0 / 6.0)).sqrt();
        for (q, &c) in qualities.iter().zip(counts.iter()) {
            let dev = (c as f64 - expected).abs();
            assert!(dev <= 3.0 * sigma, "quality {q}: count {c} deviates {dev:.1} > 3 sigma");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        for p in registry() {
            let a = sample_params(p.kind, &mut rng::stream(42, "det", 3));
            let b = sample_params(p.kind, &mut rng::stream(42, "det", 3));
            assert_eq!(a, b, "{}", p.id);
        }
    }

    #[test]
    fn apply_is_deterministic() {
        let x = batch(2, 16, 16, 1);
        let mut rng = rng::stream(9, "apply-det", 0);
        for p in registry() {
            let params = sample_params(p.kind, &mut rng);
            let y1 = apply_tensor(&x, &params).unwrap();
            let y2 = apply_tensor(&x, &params).unwrap();
            assert_eq!(bits(&y1), bits(&y2), "{}", p.id);
        }
    }

    #[test]
    fn identity_and_unit_branches_are_bit_exact() {
        let x = batch(2, 16, 16, 2);
        for params in [
            AttackParams::Identity,
            AttackParams::Brightness { factor: 1.0 },
            AttackParams::Hflip { on: false },
            AttackParams::Grayscale { on: false },
        ] {
            let y = apply_tensor(&x, &params).unwrap();
            assert_eq!(bits(&x), bits(&y), "{params:?}");
        }
    }

    #[test]
    fn hflip_is_an_involution() {
        let x = batch(2, 16, 16, 3);
        let on = AttackParams::Hflip { on: true };
        let y = apply_tensor(&apply_tensor(&x, &on).unwrap(), &on).unwrap();
        assert_eq!(bits(&x), bits(&y));
    }

    #[test]
    fn four_quarter_turns_return_to_start() {
        let x = batch(2, 32, 32, 4);
        let p = AttackParams::Rotate { degrees: 90.0 };
        let mut y = x.clone();
        for _ in 0..4 {
            y = apply_tensor(&y, &p).unwrap();
        }
        let d: f32 = (y - &x).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap();
        assert!(d <= 1e-5, "max abs error {d}");
    }

    #[test]
    fn per_element_arms_match_one_at_a_time_application() {
        let x = batch(5, 8, 8, 11);
        let params = vec![
            AttackParams::Identity,
            AttackParams::Brightness { factor: 0.5 },
            AttackParams::Contrast { factor: 1.5 },
        ];
        let arms = vec![2usize, 0, 2, 1, 0];
        let grouped = apply_arms(&x, &arms, &params).unwrap();
        for i in 0..5 {
            let xi = x.narrow(0, i, 1).unwrap();
            let want = apply_tensor(&xi, &params[arms[i]]).unwrap();
            let got = grouped.narrow(0, i, 1).unwrap();
            let a = want.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let b = got.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(a, b, "element {i}");
        }
    }

    #[test]
    fn out_of_range_params_are_rejected() {
        let cases = [
            AttackParams::Rotate { degrees: 91.0 },
            AttackParams::Resize { scale: 0.2 },
            AttackParams::Crop { area: 1.2, ox: 0.5, oy: 0.5 },
            AttackParams::Perspective { scale: 0.9, corners: [0.5; 8] },
            AttackParams::Brightness { factor: 0.05 },
            AttackParams::Contrast { factor: 2.5 },
            AttackParams::Hue { shift: 0.6 },
            AttackParams::Blur { kernel_px: 7 },
            AttackParams::Jpeg { quality: 55 },
        ];
        for params in cases {
            assert!(
                matches!(
                    apply_tensor(&batch(1, 8, 8, 5), &params),
                    Err(crate::Error::OutOfRangeParam { .. })
                ),
                "{params:?} should be rejected"
            );
        }
    }

    #[test]
    fn grid_instantiation_covers_all_primitives() {
        let mut rng = rng::stream(6, "grid", 0);
        let cases: [(Primitive, f64); 12] = [
            (Primitive::Rotate, 90.0),
            (Primitive::Resize, 0.32),
            (Primitive::Crop, 0.55),
            (Primitive::Perspective, 0.8),
            (Primitive::Hflip, 1.0),
            (Primitive::Brightness, 0.1),
            (Primitive::Contrast, 2.0),
            (Primitive::Hue, -0.4),
            (Primitive::Grayscale, 1.0),
            (Primitive::GaussianBlur, 17.0),
            (Primitive::Jpeg, 40.0),
            (Primitive::Identity, 0.0),
        ];
        let x = batch(1, 16, 16, 7);
        for (prim, value) in cases {
            let params = params_for_grid(prim, value, &mut rng).unwrap();
            assert_eq!(params.primitive(), prim);
            apply_tensor(&x, &params).unwrap();
        }
    }

    /// Central-difference check of `d mean(attack(x)) / d pixel` for one
    /// attack at several random interior pixels.
    fn finite_difference_check(params: &AttackParams, n_pixels: usize, tol: f64, seed: u64) {
        let (b, h, w) = (2usize, 32usize, 32usize);
        let x = batch(b, h, w, seed);
        let base: Vec<f32> = x.flatten_all().unwrap().to_vec1().unwrap();

        let var = Var::from_tensor(&x).unwrap();
        let y = apply_tensor(var.as_tensor(), params).unwrap();
        let y_base: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
        let loss = y.mean_all().unwrap();
        let grads = loss.backward().unwrap();
        let g: Vec<f32> = grads
            .get(var.as_tensor())
            .expect("input gradient missing")
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();

        // Mean in f64 so the reduction adds no noise of its own.
        let mean_f64 = |t: &Tensor| -> f64 {
            let v: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
            v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64
        };

        let mut rng = rng::stream(seed, "fd-pixels", 0);
        let hstep = 1e-3;
        for _ in 0..n_pixels {
            // Interior probes: away from the border spatially, and with the
            // co-located output away from the clamp so the perturbation does
            // not straddle a kink.
            let idx = loop {
                let bi = (rng::uniform_open01(&mut rng) * b as f64) as usize;
                let ci = (rng::uniform_open01(&mut rng) * 3.0) as usize;
                let yi = 2 + (rng::uniform_open01(&mut rng) * (h - 4) as f64) as usize;
                let xi = 2 + (rng::uniform_open01(&mut rng) * (w - 4) as f64) as usize;
                let idx = ((bi * 3 + ci) * h + yi) * w + xi;
                if (0.02..=0.98).contains(&y_base[idx]) {
                    break idx;
                }
            };

            let mut plus = base.clone();
            plus[idx] += hstep as f32;
            let mut minus = base.clone();
            minus[idx] -= hstep as f32;
            let xp = Tensor::from_vec(plus, (b, 3, h, w), &Device::Cpu).unwrap();
            let xm = Tensor::from_vec(minus, (b, 3, h, w), &Device::Cpu).unwrap();
            let fp = mean_f64(&apply_tensor(&xp, params).unwrap());
            let fm = mean_f64(&apply_tensor(&xm, params).unwrap());
            let fd = (fp - fm) / (2.0 * hstep);
            let gi = g[idx] as f64;

            let denom = fd.abs().max(gi.abs()).max(1e-6);
            let rel = (gi - fd).abs() / denom;
            assert!(
                rel < tol,
                "{params:?} pixel {idx}: autodiff {gi:.3e} vs fd {fd:.3e} (rel {rel:.3e})"
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = rng::stream(31, "fd-params", 0);
        for p in registry() {
            let params = sample_params(p.kind, &mut rng);
            let tol = if p.kind == Primitive::Jpeg { 1e-2 } else { 1e-3 };
            finite_difference_check(&params, 5, tol, 100 + p.kind.index() as u64);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn shape_and_range_preserved(seed in 0u64..1000, prim_idx in 0usize..12) {
            let prim = registry()[prim_idx].kind;
            let mut r = rng::stream(seed, "prop", prim_idx as u64);
            let params = sample_params(prim, &mut r);
            let x = batch(1, 16, 16, seed);
            let y = apply_tensor(&x, &params).unwrap();
            prop_assert_eq!(y.dims(), x.dims());
            let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
            prop_assert!(v.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)));
        }
    }
}
