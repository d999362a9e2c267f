//! Speaker-personalized speech emotion representations.
//!
//! The crate covers the full pipeline at desk scale: a synthetic corpus with
//! planted speaker effects, a small convolution + transformer encoder with a
//! fusable speaker-embedding table, masked pseudo-label pre-training, CCC
//! fine-tuning, per-speaker label distribution calibration and the evaluation
//! harnesses around them.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases at
//! the crate root fix the scalar used by the pipeline.

pub mod autodiff;
pub mod calibrate;
pub mod corpus;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod metrics;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Encoder at the pipeline precision.
pub type Encoder = encoder::EncoderModel<f64>;
pub type Pipeline = evalkit::TrainedPipeline<f64>;
pub type PaptResult = pretrain::PaptOutcome<f64>;
pub type FinetuneResult = downstream::FinetuneOutcome<f64>;
pub type Matrix = tensor::Matrix<f64>;
