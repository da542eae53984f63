//! Experiment framework for studying training losses and learnable gamma
//! preprocessing in grid-to-grid climate downscaling.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! at the crate root fix the working precision to `f64`.

pub mod checkpoint;
pub mod checks;
pub mod config;
mod container;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod preprocessing;
pub mod render;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{BatchNormState, NormMode, Var};

/// Working-precision tensor.
pub type Tensor = tensor::Tensor<f64>;
/// Working-precision differentiation tape.
pub type Tape = tensor::Tape<f64>;
/// Working-precision UNet.
pub type Model = model::Model<f64>;
pub type GammaTransform = preprocessing::GammaTransform<f64>;
pub type LinearNormalizer = preprocessing::LinearNormalizer<f64>;
/// Gamma followed by per-channel normalization, as fitted for one run.
pub type Pipeline = preprocessing::Pipeline<f64>;
pub type Checkpoint = checkpoint::Checkpoint<f64>;
pub type Adam = training::Adam<f64>;
pub type TrainOutcome = training::TrainOutcome<f64>;
