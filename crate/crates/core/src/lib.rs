pub mod bayes;
pub mod data;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::{RngStream, Site};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor.
pub type Tensor64 = Tensor<f64>;
