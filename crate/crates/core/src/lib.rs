//! Robust invisible image watermarking trained against a learned,
//! compositional attack policy.
//!
//! The library has three layers:
//!
//! - **Models**: a residual embedder that hides a bit string in an image and
//!   a convolutional extractor that recovers per-bit scores ([`watermark`]).
//! - **Attacks**: a registry of twelve differentiable image transforms
//!   ([`attacks`]) and a recurrent controller that learns to select and chain
//!   them through a straight-through Gumbel-Softmax relaxation ([`adversary`]).
//! - **Harness**: joint min-max training with compute-matched baselines
//!   ([`training`]), decoding/quality metrics ([`metrics`]), and single-step /
//!   compositional evaluation grids with CSV/JSON reports ([`evalharness`]).
//!
//! Everything is seeded: a run is a pure function of its config and seed, and
//! the per-step randomness is derived statelessly so runs are resumable and
//! reports reproduce byte-for-byte.

pub mod adversary;
pub mod attacks;
pub mod color;
pub mod config;
pub mod data;
pub mod error;
pub mod evalharness;
pub mod image_batch;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod training;
pub mod watermark;

pub use error::{Error, Result};
pub use image_batch::{ColorSpace, ImageBatch};
