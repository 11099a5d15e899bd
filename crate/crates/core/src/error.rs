//! Error type shared across the library.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("parameter {value} out of range for {primitive} (valid: {range})")]
    OutOfRangeParam {
        primitive: &'static str,
        value: f64,
        range: String,
    },

    #[error("unknown attack primitive: {0}")]
    UnknownPrimitive(String),

    #[error("payload mismatch: model expects {expected} bits, message has {got}")]
    PayloadMismatch { expected: usize, got: usize },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("non-finite loss at step {step} ({which})")]
    NonFiniteLoss { step: usize, which: &'static str },

    #[error("dataset is empty ({0})")]
    EmptyDataset(String),

    #[error("config parse error: {0}")]
    ParseError(String),

    #[error("config validation failed:\n{}", issues.join("\n"))]
    ValidationError { issues: Vec<String> },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("csv error: {0}")]
    Csv(String),

    #[error("json error: {0}")]
    Json(String),

    #[error("image error: {0}")]
    Image(String),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
