//! Bilinear resampling plans for the geometric attacks.
//!
//! A [`WarpPlan`] precomputes, for every output pixel, the four source
//! indices and bilinear weights of its sampling point. Applying the plan is
//! then a gather plus a weighted sum, which keeps the whole warp
//! differentiable with respect to pixel values (the grid itself is fixed by
//! the attack parameters). Source points that fall outside the image get
//! weight zero, i.e. zero padding.

use candle_core::Tensor;

use crate::Result;

/// Snap tolerance for sampling coordinates that should be exact integers
/// (flips, quarter turns) but picked up ~1e-16 of trig noise.
const SNAP_EPS: f64 = 1e-9;

/// Precomputed gather indices and weights for one output geometry.
pub struct WarpPlan {
    /// Flattened source indices, `out_h * out_w * 4` entries.
    idx: Tensor,
    /// Bilinear weights, shape `(1, 1, out_h * out_w, 4)`.
    weights: Tensor,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
}

impl WarpPlan {
    /// Builds a plan from a map sending output pixel centers to source
    /// coordinates, both in pixel units (`map(y, x) -> (src_y, src_x)`).
    pub fn build<F>(
        out_h: usize,
        out_w: usize,
        in_h: usize,
        in_w: usize,
        device: &candle_core::Device,
        map: F,
    ) -> Result<Self>
    where
        F: Fn(f64, f64) -> (f64, f64),
    {
        let n = out_h * out_w;
        let mut idx = Vec::with_capacity(n * 4);
        let mut weights = Vec::with_capacity(n * 4);
        for y in 0..out_h {
            for x in 0..out_w {
                let (mut sy, mut sx) = map(y as f64, x as f64);
                if (sy - sy.round()).abs() < SNAP_EPS {
                    sy = sy.round();
                }
                if (sx - sx.round()).abs() < SNAP_EPS {
                    sx = sx.round();
                }
                let y0 = sy.floor();
                let x0 = sx.floor();
                let fy = sy - y0;
                let fx = sx - x0;
                let corners = [
                    (y0, x0, (1.0 - fy) * (1.0 - fx)),
                    (y0, x0 + 1.0, (1.0 - fy) * fx),
                    (y0 + 1.0, x0, fy * (1.0 - fx)),
                    (y0 + 1.0, x0 + 1.0, fy * fx),
                ];
                for (cy, cx, w) in corners {
                    let inside = cy >= 0.0 && cx >= 0.0 && (cy as usize) < in_h && (cx as usize) < in_w;
                    if inside && w != 0.0 {
                        idx.push((cy as usize * in_w + cx as usize) as u32);
                        weights.push(w as f32);
                    } else {
                        idx.push(0);
                        weights.push(0.0);
                    }
                }
            }
        }
        Ok(Self {
            idx: Tensor::from_vec(idx, n * 4, device)?,
            weights: Tensor::from_vec(weights, (1, 1, n, 4), device)?,
            in_h,
            in_w,
            out_h,
            out_w,
        })
    }

    /// Resamples `(B, C, in_h, in_w)` into `(B, C, out_h, out_w)`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if h != self.in_h || w != self.in_w {
            return Err(crate::Error::ShapeMismatch {
                expected: format!("(B, C, {}, {})", self.in_h, self.in_w),
                got: format!("{:?}", x.dims()),
            });
        }
        let flat = x.reshape((b, c, h * w))?;
        let gathered = flat
            .index_select(&self.idx, 2)?
            .reshape((b, c, self.out_h * self.out_w, 4))?;
        let blended = gathered.broadcast_mul(&self.weights)?.sum(3)?;
        Ok(blended.reshape((b, c, self.out_h, self.out_w))?)
    }
}

/// Plan for rotation by `degrees` counterclockwise about the image center.
pub fn rotate_plan(
    h: usize,
    w: usize,
    degrees: f64,
    device: &candle_core::Device,
) -> Result<WarpPlan> {
    let theta = degrees.to_radians();
    let (s, c) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    // Inverse map: rotate output coordinates clockwise back onto the source.
    WarpPlan::build(h, w, h, w, device, move |y, x| {
        let dy = y - cy;
        let dx = x - cx;
        (cy + c * dy + s * dx, cx - s * dy + c * dx)
    })
}

/// Plan pair for scaling to `round(scale * side)` and back, the resample-back
/// convention that keeps attack outputs at the input shape.
pub fn resize_plans(
    h: usize,
    w: usize,
    scale: f64,
    device: &candle_core::Device,
) -> Result<(WarpPlan, WarpPlan, usize, usize)> {
    let mid_h = ((h as f64 * scale).round() as usize).max(1);
    let mid_w = ((w as f64 * scale).round() as usize).max(1);
    let down = scale_plan(mid_h, mid_w, h, w, device)?;
    let up = scale_plan(h, w, mid_h, mid_w, device)?;
    Ok((down, up, mid_h, mid_w))
}

/// Plain bilinear rescale plan, half-pixel-center convention.
pub fn scale_plan(
    out_h: usize,
    out_w: usize,
    in_h: usize,
    in_w: usize,
    device: &candle_core::Device,
) -> Result<WarpPlan> {
    let ry = in_h as f64 / out_h as f64;
    let rx = in_w as f64 / out_w as f64;
    WarpPlan::build(out_h, out_w, in_h, in_w, device, move |y, x| {
        ((y + 0.5) * ry - 0.5, (x + 0.5) * rx - 0.5)
    })
}

/// Fused crop-and-resize-back plan. The window has area `area * H * W`, its
/// offset chosen by fractions `ox, oy` in `[0, 1)` over the valid positions.
pub fn crop_plan(
    h: usize,
    w: usize,
    area: f64,
    ox: f64,
    oy: f64,
    device: &candle_core::Device,
) -> Result<WarpPlan> {
    let side = area.sqrt();
    let win_h = ((h as f64 * side).round() as usize).clamp(1, h);
    let win_w = ((w as f64 * side).round() as usize).clamp(1, w);
    let top = ((oy * (h - win_h + 1) as f64).floor() as usize).min(h - win_h);
    let left = ((ox * (w - win_w + 1) as f64).floor() as usize).min(w - win_w);
    let ry = win_h as f64 / h as f64;
    let rx = win_w as f64 / w as f64;
    WarpPlan::build(h, w, h, w, device, move |y, x| {
        (
            top as f64 + (y + 0.5) * ry - 0.5,
            left as f64 + (x + 0.5) * rx - 0.5,
        )
    })
}

/// Horizontal mirror plan. Integer source coordinates, so applying it twice
/// reproduces the input bit for bit.
pub fn hflip_plan(h: usize, w: usize, device: &candle_core::Device) -> Result<WarpPlan> {
    WarpPlan::build(h, w, h, w, device, move |y, x| (y, w as f64 - 1.0 - x))
}

/// Perspective plan: the four corners move inward by `scale` of the half
/// extent, each scaled by a fraction in `corners` (order: tl.x, tl.y, tr.x,
/// tr.y, br.x, br.y, bl.x, bl.y).
pub fn perspective_plan(
    h: usize,
    w: usize,
    scale: f64,
    corners: &[f64; 8],
    device: &candle_core::Device,
) -> Result<WarpPlan> {
    let hw = scale * (w as f64 - 1.0) / 2.0;
    let hh = scale * (h as f64 - 1.0) / 2.0;
    let xm = w as f64 - 1.0;
    let ym = h as f64 - 1.0;
    // Where each source corner lands in the output.
    let dst = [
        [corners[0] * hw, corners[1] * hh],
        [xm - corners[2] * hw, corners[3] * hh],
        [xm - corners[4] * hw, ym - corners[5] * hh],
        [corners[6] * hw, ym - corners[7] * hh],
    ];
    let src = [[0.0, 0.0], [xm, 0.0], [xm, ym], [0.0, ym]];
    let m = homography(&dst, &src)?;
    WarpPlan::build(h, w, h, w, device, move |y, x| {
        let den = m[6] * x + m[7] * y + 1.0;
        ((m[3] * x + m[4] * y + m[5]) / den, (m[0] * x + m[1] * y + m[2]) / den)
    })
}

/// Fits the 8-parameter homography sending each `from` point to its `to`
/// point: `to = ((m0 x + m1 y + m2) / d, (m3 x + m4 y + m5) / d)` with
/// `d = m6 x + m7 y + 1`.
fn homography(from: &[[f64; 2]; 4], to: &[[f64; 2]; 4]) -> Result<[f64; 8]> {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let [x, y] = from[i];
        let [u, v] = to[i];
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    // Gaussian elimination with partial pivoting on the 8x9 system.
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&r1, &r2| a[r1][col].abs().total_cmp(&a[r2][col].abs()))
            .unwrap();
        if a[pivot][col].abs() < 1e-12 {
            return Err(crate::Error::DomainError(
                "degenerate perspective corners".into(),
            ));
        }
        a.swap(col, pivot);
        let inv = 1.0 / a[col][col];
        for j in col..9 {
            a[col][j] *= inv;
        }
        for row in 0..8 {
            if row != col && a[row][col] != 0.0 {
                let f = a[row][col];
                for j in col..9 {
                    a[row][j] -= f * a[col][j];
                }
            }
        }
    }
    let mut m = [0.0f64; 8];
    for i in 0..8 {
        m[i] = a[i][8];
    }
    Ok(m)
}
