//! Gaussian blur as two separable depthwise convolutions.

use candle_core::Tensor;

use crate::Result;

/// Sigma convention tied to kernel size, matching the common image-library
/// default so blur strength is comparable across toolchains.
pub fn sigma_for_kernel(kernel_px: usize) -> f64 {
    0.3 * ((kernel_px as f64 - 1.0) * 0.5 - 1.0) + 0.8
}

fn kernel_1d(kernel_px: usize) -> Vec<f32> {
    let sigma = sigma_for_kernel(kernel_px);
    let half = (kernel_px / 2) as f64;
    let mut k: Vec<f64> = (0..kernel_px)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k.iter().map(|&v| v as f32).collect()
}

/// Reflects dimension `dim` by `pad` pixels on both sides (edge excluded),
/// falling back to edge clamping when the image is smaller than the pad.
fn reflect_pad(x: &Tensor, dim: usize, pad: usize) -> Result<Tensor> {
    let n = x.dims()[dim];
    let mut order: Vec<u32> = Vec::with_capacity(n + 2 * pad);
    for i in 0..pad {
        order.push((pad - i).min(n - 1) as u32);
    }
    for i in 0..n {
        order.push(i as u32);
    }
    for i in 0..pad {
        let want = n as i64 - 2 - i as i64;
        order.push(want.max(0) as u32);
    }
    let idx = Tensor::from_vec(order, n + 2 * pad, x.device())?;
    Ok(x.index_select(&idx, dim)?)
}

/// Blurs a `(B, 3, H, W)` batch with a `kernel_px`-tap Gaussian. The kernel
/// is normalized, so outputs stay inside the input value range.
pub fn gaussian_blur(x: &Tensor, kernel_px: usize) -> Result<Tensor> {
    if kernel_px % 2 == 0 {
        return Err(crate::Error::DomainError(format!(
            "blur kernel must be odd, got {kernel_px}"
        )));
    }
    if kernel_px == 1 {
        return Ok(x.clone());
    }
    let (_b, c, _h, _w) = x.dims4()?;
    let pad = kernel_px / 2;
    let k = kernel_1d(kernel_px);
    let dev = x.device();
    let row = Tensor::from_vec(k.clone(), (1, 1, 1, kernel_px), dev)?
        .broadcast_as((c, 1, 1, kernel_px))?
        .contiguous()?;
    let col = Tensor::from_vec(k, (1, 1, kernel_px, 1), dev)?
        .broadcast_as((c, 1, kernel_px, 1))?
        .contiguous()?;
    let padded = reflect_pad(x, 3, pad)?;
    let hpass = padded.conv2d(&row, 0, 1, 1, c)?;
    let padded = reflect_pad(&hpass, 2, pad)?;
    Ok(padded.conv2d(&col, 0, 1, 1, c)?.clamp(0.0, 1.0)?)
}
