//! Decoding and image-quality metrics: bit accuracy, Bernoulli entropy,
//! binary-symmetric-channel capacity, one-sided binomial significance,
//! PSNR and SSIM.
//!
//! All functions here are pure and deterministic; scalar math is done in f64
//! regardless of tensor dtype.

use candle_core::Tensor;

use crate::error::{Error, Result};

/// Decodes per-bit scores: bit i is 1 iff `sigmoid(score_i) > 0.5`.
pub fn decode_bits(scores: &[f32]) -> Vec<u8> {
    scores.iter().map(|&s| u8::from(sigmoid(s) > 0.5)).collect()
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Number of correctly decoded bits between flattened score/message slices.
pub fn count_correct(scores: &[f32], message: &[f32]) -> Result<u64> {
    if scores.len() != message.len() {
        return Err(Error::LengthMismatch(scores.len(), message.len()));
    }
    let decoded = decode_bits(scores);
    Ok(decoded
        .iter()
        .zip(message.iter())
        .filter(|(&d, &m)| d == (m > 0.5) as u8)
        .count() as u64)
}

/// Fraction of payload bits decoded correctly, averaged over the batch.
///
/// `scores` are raw (pre-sigmoid) extractor outputs of shape `(batch, d_m)`;
/// `message` holds the embedded bits as 0/1 values of the same shape.
pub fn bit_accuracy(scores: &Tensor, message: &Tensor) -> Result<f64> {
    if scores.dims() != message.dims() {
        return Err(Error::LengthMismatch(
            scores.elem_count(),
            message.elem_count(),
        ));
    }
    let s = scores.flatten_all()?.to_vec1::<f32>()?;
    let m = message.flatten_all()?.to_vec1::<f32>()?;
    if s.is_empty() {
        return Err(Error::DomainError("empty score tensor".into()));
    }
    let correct = count_correct(&s, &m)?;
    Ok(correct as f64 / s.len() as f64)
}

/// Bernoulli entropy in bits: `H(p) = -p log2 p - (1-p) log2 (1-p)`,
/// with `H(0) = H(1) = 0` by continuity.
pub fn bernoulli_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return Err(Error::DomainError(format!("p = {p} outside [0, 1]")));
    }
    if p == 0.0 || p == 1.0 {
        return Ok(0.0);
    }
    Ok(-p * p.log2() - (1.0 - p) * (1.0 - p).log2())
}

/// Binary-symmetric-channel estimate of reliably transmissible bits for a
/// payload of `d_m` bits decoded with per-bit accuracy `p`.
pub fn capacity(p: f64, d_m: usize) -> Result<f64> {
    if d_m == 0 {
        return Err(Error::DomainError("payload must be positive".into()));
    }
    Ok(d_m as f64 * (1.0 - bernoulli_entropy(p)?))
}

/// One-sided tail `P(X >= n_correct)` for `X ~ Binomial(n_bits, 1/2)`:
/// the significance of decoding against a coin-flip extractor.
///
/// Exact summation up to 10^3 bits, normal approximation with continuity
/// correction above.
pub fn binomial_pvalue(n_correct: u64, n_bits: u64) -> Result<f64> {
    if n_correct > n_bits {
        return Err(Error::DomainError(format!(
            "n_correct {n_correct} > n_bits {n_bits}"
        )));
    }
    if n_correct == 0 {
        return Ok(1.0);
    }
    if n_bits <= 1000 {
        let lnfact = ln_factorials(n_bits as usize);
        let ln2 = std::f64::consts::LN_2;
        let mut sum = 0.0f64;
        for k in n_correct..=n_bits {
            let ln_c = lnfact[n_bits as usize]
                - lnfact[k as usize]
                - lnfact[(n_bits - k) as usize];
            sum += (ln_c - n_bits as f64 * ln2).exp();
        }
        Ok(sum.min(1.0))
    } else {
        let n = n_bits as f64;
        let mu = 0.5 * n;
        let sigma = 0.5 * n.sqrt();
        let z = (n_correct as f64 - 0.5 - mu) / sigma;
        // Far tails underflow erfc to zero; a p-value is never exactly zero,
        // so floor at the smallest positive float.
        Ok((0.5 * erfc(z / std::f64::consts::SQRT_2)).clamp(f64::MIN_POSITIVE, 1.0))
    }
}

fn ln_factorials(n: usize) -> Vec<f64> {
    let mut table = vec![0.0f64; n + 1];
    for i in 2..=n {
        table[i] = table[i - 1] + (i as f64).ln();
    }
    table
}

/// Complementary error function, Abramowitz & Stegun 7.1.26 (|error| < 1.5e-7,
/// ample for the approximate p-value regime where it is used).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * z);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let e = poly * (-z * z).exp();
    if x >= 0.0 {
        e
    } else {
        2.0 - e
    }
}

/// PSNR result; identical images have infinite PSNR and get a distinguished
/// variant rather than a fake large number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Db(f64),
    Infinite,
}

impl Psnr {
    /// Finite value in dB, or `None` for identical images.
    pub fn db(self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(v),
            Psnr::Infinite => None,
        }
    }
}

impl std::fmt::Display for Psnr {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Psnr::Db(v) => write!(f, "{v:.4}"),
            Psnr::Infinite => write!(f, "inf"),
        }
    }
}

/// Mean squared error over all elements, accumulated in f64.
pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.dims() != y.dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", x.dims()),
            got: format!("{:?}", y.dims()),
        });
    }
    let a = x.flatten_all()?.to_vec1::<f32>()?;
    let b = y.flatten_all()?.to_vec1::<f32>()?;
    let sum: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// Peak signal-to-noise ratio for images in `[0, 1]`: `10 log10(1 / MSE)`.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<Psnr> {
    let m = mse(x, y)?;
    if m == 0.0 {
        Ok(Psnr::Infinite)
    } else {
        Ok(Psnr::Db(10.0 * (1.0 / m).log10()))
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Structural similarity with the standard 11x11 Gaussian window
/// (sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1), averaged over valid
/// window positions and channels. Requires height and width >= 11.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.dims() != y.dims() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", x.dims()),
            got: format!("{:?}", y.dims()),
        });
    }
    let (b, c, h, w) = x.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::DomainError(format!(
            "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let xs = x.flatten_all()?.to_vec1::<f32>()?;
    let ys = y.flatten_all()?.to_vec1::<f32>()?;

    let kernel = gaussian_kernel_2d(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * SSIM_K1) as f64;
    let c2 = (SSIM_K2 * SSIM_K2) as f64;

    let mut total = 0.0f64;
    let mut count = 0usize;
    for bi in 0..b {
        for ci in 0..c {
            let off = (bi * c + ci) * h * w;
            let plane_x = &xs[off..off + h * w];
            let plane_y = &ys[off..off + h * w];
            for oy in 0..=(h - SSIM_WINDOW) {
                for ox in 0..=(w - SSIM_WINDOW) {
                    let (mut mx, mut my) = (0.0f64, 0.0f64);
                    let (mut sxx, mut syy, mut sxy) = (0.0f64, 0.0f64, 0.0f64);
                    for ky in 0..SSIM_WINDOW {
                        for kx in 0..SSIM_WINDOW {
                            let wgt = kernel[ky * SSIM_WINDOW + kx];
                            let px = plane_x[(oy + ky) * w + ox + kx] as f64;
                            let py = plane_y[(oy + ky) * w + ox + kx] as f64;
                            mx += wgt * px;
                            my += wgt * py;
                            sxx += wgt * px * px;
                            syy += wgt * py * py;
                            sxy += wgt * px * py;
                        }
                    }
                    let vx = sxx - mx * mx;
                    let vy = syy - my * my;
                    let cxy = sxy - mx * my;
                    let s = ((2.0 * mx * my + c1) * (2.0 * cxy + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    total += s;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

fn gaussian_kernel_2d(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut k = vec![0.0f64; size * size];
    let mut sum = 0.0;
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let v = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
            k[y * size + x] = v;
            sum += v;
        }
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use proptest::prelude::*;

    use crate::rng::stream;
    use rand::Rng;

    fn dev() -> Device {
        Device::Cpu
    }

    fn tensor(data: &[f32], dims: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), dims, &dev()).unwrap()
    }

    /// Exact `P(X >= k)` for `X ~ Binomial(n, 1/2)` via integer enumeration:
    /// numerator and denominator are exact in u128 for n <= 20.
    fn enumeration_pvalue(k: u64, n: u64) -> f64 {
        assert!(n <= 20);
        let mut num: u128 = 0;
        for j in k..=n {
            num += binomial_u128(n, j);
        }
        num as f64 / (1u128 << n) as f64
    }

    fn binomial_u128(n: u64, k: u64) -> u128 {
        let mut c: u128 = 1;
        for i in 0..k {
            c = c * (n - i) as u128 / (i + 1) as u128;
        }
        c
    }

    #[test]
    fn bit_accuracy_counts() {
        let m = tensor(&[1.0, 0.0, 1.0, 1.0], &[1, 4]);
        let perfect = tensor(&[20.0, -20.0, 20.0, 20.0], &[1, 4]);
        let flipped = tensor(&[-20.0, 20.0, -20.0, -20.0], &[1, 4]);
        assert_eq!(bit_accuracy(&perfect, &m).unwrap(), 1.0);
        assert_eq!(bit_accuracy(&flipped, &m).unwrap(), 0.0);

        // 12 of 16 bits correct -> 0.75
        let msg: Vec<f32> = (0..16).map(|i| (i % 2) as f32).collect();
        let scores: Vec<f32> = msg
            .iter()
            .enumerate()
            .map(|(i, &b)| {
                let sign = if b > 0.5 { 1.0 } else { -1.0 };
                if i < 4 {
                    -10.0 * sign
                } else {
                    10.0 * sign
                }
            })
            .collect();
        let acc = bit_accuracy(&tensor(&scores, &[2, 8]), &tensor(&msg, &[2, 8])).unwrap();
        assert_eq!(acc, 0.75);
    }

    #[test]
    fn bit_accuracy_rejects_mismatched_shapes() {
        let a = tensor(&[0.0; 4], &[1, 4]);
        let b = tensor(&[0.0; 8], &[1, 8]);
        assert!(bit_accuracy(&a, &b).is_err());
    }

    #[test]
    fn entropy_known_values() {
        assert_eq!(bernoulli_entropy(0.5).unwrap(), 1.0);
        assert_eq!(bernoulli_entropy(1.0).unwrap(), 0.0);
        assert_eq!(bernoulli_entropy(0.0).unwrap(), 0.0);
        let h = bernoulli_entropy(0.9).unwrap();
        assert!((h - 0.4690).abs() < 1e-4, "H(0.9) = {h}");
        assert!(bernoulli_entropy(1.1).is_err());
        assert!(bernoulli_entropy(-0.1).is_err());
    }

    #[test]
    fn entropy_concave_and_peaked_at_half() {
        // midpoint concavity on a grid, plus the maximum at p = 0.5
        let grid: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
        for w in grid.windows(3) {
            let (a, b, c) = (w[0], w[1], w[2]);
            let ha = bernoulli_entropy(a).unwrap();
            let hb = bernoulli_entropy(b).unwrap();
            let hc = bernoulli_entropy(c).unwrap();
            assert!(hb >= 0.5 * (ha + hc) - 1e-12);
            assert!(hb <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn capacity_known_values() {
        assert_eq!(capacity(1.0, 96).unwrap(), 96.0);
        assert_eq!(capacity(0.5, 96).unwrap(), 0.0);
        assert_eq!(capacity(0.0, 64).unwrap(), 64.0);
        let c = capacity(0.9, 96).unwrap();
        assert!((c - 50.98).abs() < 0.02, "capacity(0.9, 96) = {c}");
    }

    #[test]
    fn capacity_symmetric_and_monotone() {
        for i in 0..=50 {
            let p = i as f64 / 100.0;
            let a = capacity(p, 32).unwrap();
            let b = capacity(1.0 - p, 32).unwrap();
            assert!((a - b).abs() < 1e-12);
        }
        let mut prev = -1.0;
        for i in 0..=50 {
            let p = 0.5 + i as f64 / 100.0;
            let c = capacity(p, 32).unwrap();
            assert!(c > prev, "capacity not increasing at p = {p}");
            prev = c;
        }
    }

    #[test]
    fn pvalue_frozen_values() {
        // all-zero decode: the tail is the whole distribution
        assert_eq!(binomial_pvalue(0, 16).unwrap(), 1.0);
        // perfect 16-bit decode: 2^-16
        let p = binomial_pvalue(16, 16).unwrap();
        assert!((p - 2f64.powi(-16)).abs() < 1e-12, "p = {p}");
        // 12 of 16: (C(16,12)+C(16,13)+C(16,14)+C(16,15)+C(16,16)) / 2^16
        let p = binomial_pvalue(12, 16).unwrap();
        assert!((p - 2517.0 / 65536.0).abs() < 1e-12, "p = {p}");
    }

    #[test]
    fn pvalue_matches_enumeration_up_to_20_bits() {
        for n in 1..=20u64 {
            for k in 0..=n {
                let got = binomial_pvalue(k, n).unwrap();
                let want = enumeration_pvalue(k, n);
                assert!(
                    (got - want).abs() < 1e-12,
                    "pvalue({k}, {n}) = {got}, enumeration {want}"
                );
            }
        }
    }

    #[test]
    fn pvalue_monotone_in_correct_count() {
        for n in [5u64, 16, 100, 1000, 5000] {
            let mut prev = f64::INFINITY;
            let step = (n / 50).max(1);
            for k in (0..=n).step_by(step as usize) {
                let p = binomial_pvalue(k, n).unwrap();
                assert!(p <= prev + 1e-12, "not monotone at ({k}, {n})");
                prev = p;
            }
        }
    }

    #[test]
    fn pvalue_approx_path_close_to_exact_at_boundary() {
        // same quantile computed exactly (n = 1000) and approximately: the
        // normal path should agree to a few percent in this regime
        let exact = binomial_pvalue(530, 1000).unwrap();
        let n = 1000.0f64;
        let z = (530.0 - 0.5 - 0.5 * n) / (0.5 * n.sqrt());
        let approx = 0.5 * erfc(z / std::f64::consts::SQRT_2);
        assert!((exact - approx).abs() / exact < 0.05);
    }

    #[test]
    fn psnr_of_constant_shift() {
        let x: Vec<f32> = (0..48).map(|i| (i as f32) / 100.0).collect();
        let y: Vec<f32> = x.iter().map(|v| v + 0.1).collect();
        let xt = tensor(&x, &[1, 3, 4, 4]);
        let yt = tensor(&y, &[1, 3, 4, 4]);
        // 0.1 is not exactly representable in f32; tolerance covers rounding
        let p = psnr(&xt, &yt).unwrap().db().unwrap();
        assert!((p - 20.0).abs() < 1e-6, "psnr = {p}");
        assert_eq!(psnr(&xt, &xt).unwrap(), Psnr::Infinite);
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let mut rng = stream(3, "ssim", 0);
        let x: Vec<f32> = (0..2 * 3 * 16 * 16).map(|_| rng.gen::<f32>()).collect();
        let y: Vec<f32> = (0..2 * 3 * 16 * 16).map(|_| rng.gen::<f32>()).collect();
        let xt = tensor(&x, &[2, 3, 16, 16]);
        let yt = tensor(&y, &[2, 3, 16, 16]);
        assert!((ssim(&xt, &xt).unwrap() - 1.0).abs() < 1e-12);
        let a = ssim(&xt, &yt).unwrap();
        let b = ssim(&yt, &xt).unwrap();
        assert!((a - b).abs() < 1e-9);
        assert!(a < 1.0 && a > -1.0);
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let x = tensor(&[0.5; 3 * 8 * 8], &[1, 3, 8, 8]);
        assert!(ssim(&x, &x).is_err());
    }

    proptest! {
        #[test]
        fn capacity_bounded_by_payload(p in 0.0f64..=1.0, d_m in 1usize..256) {
            let c = capacity(p, d_m).unwrap();
            prop_assert!(c >= -1e-9 && c <= d_m as f64 + 1e-9);
        }

        #[test]
        fn pvalue_in_unit_interval(n in 1u64..2000, frac in 0.0f64..=1.0) {
            let k = (n as f64 * frac).round() as u64;
            let p = binomial_pvalue(k.min(n), n).unwrap();
            prop_assert!(p > 0.0 && p <= 1.0);
        }
    }
}
