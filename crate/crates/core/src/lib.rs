//! Cascaded squeeze-excitation / moment-exchange CNN classifiers for chest
//! radiographs, with every building block implemented from scratch.
//!
//! The numeric core is generic over [`Scalar`]; training runs in `f32` and
//! gradient checks in `f64`. The aliases below name the two instantiations.

pub mod error;
pub mod evaluation;
pub mod explain;
pub mod imageproc;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Training-precision tensor.
pub type Tensor32 = tensor::Tensor<f32>;
/// Gradient-check precision tensor.
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
