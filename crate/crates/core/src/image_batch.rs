//! Batched image container.

use candle_core::Tensor;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    Yuv,
}

/// A batch of images, channels-first `(batch, 3, height, width)`, values in
/// `[0, 1]`. Every attack primitive maps an `ImageBatch` to another of the
/// same shape.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    pub data: Tensor,
    pub color_space: ColorSpace,
}

impl ImageBatch {
    /// Wraps a tensor, checking shape and value range.
    pub fn new(data: Tensor, color_space: ColorSpace) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 4 || dims[1] != 3 {
            return Err(Error::ShapeMismatch {
                expected: "(batch, 3, height, width)".into(),
                got: format!("{dims:?}"),
            });
        }
        let flat = data.flatten_all()?.to_vec1::<f32>()?;
        if !flat.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(Error::DomainError(
                "image values must be finite and in [0, 1]".into(),
            ));
        }
        Ok(Self { data, color_space })
    }

    /// Wraps a tensor that is already known to satisfy the invariants
    /// (e.g. the output of a clamped op). Shape is still checked.
    pub fn from_tensor(data: Tensor, color_space: ColorSpace) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 4 || dims[1] != 3 {
            return Err(Error::ShapeMismatch {
                expected: "(batch, 3, height, width)".into(),
                got: format!("{dims:?}"),
            });
        }
        Ok(Self { data, color_space })
    }

    pub fn batch(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[3]
    }
}
