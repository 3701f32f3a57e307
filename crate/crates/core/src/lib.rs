//! Few-shot hierarchical text classification with knowledge-aware prompt
//! encoders and sibling contrastive learning.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). Gradient
//! checks use `f64`; the aliases below pick the usual precision for each job.

pub mod autodiff;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod kg;
pub mod metrics;
pub mod params;
pub mod run;
pub mod scalar;
pub mod seeding;
pub mod synthetic;
pub mod taxonomy;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Model32 = training::Model<f32>;
pub type Model64 = training::Model<f64>;
pub type Trainer32 = training::Trainer<f32>;
pub type Trainer64 = training::Trainer<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
