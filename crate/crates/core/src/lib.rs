//! Anticipating the next active object in short video clips.
//!
//! The crate is organized bottom-up: a small autodiff tensor engine
//! ([`tensor`]), attention building blocks ([`attention`]), detection-guided
//! fusion ([`fusion`]), the encoder/decoder anticipation model ([`model`]),
//! training losses ([`loss`]), the box+attribute evaluation protocol
//! ([`metrics`]), a synthetic clip pipeline ([`data`]), and the training
//! loop plus CLI ([`train`], [`cli`]).

pub mod attention;
pub mod checks;
pub mod data;
pub mod error;
pub mod fusion;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod overlay;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Concrete `f32` tensor, for callers that want the narrow scalar type.
pub type Tensor32 = tensor::Tensor<f32>;
/// Concrete `f64` tensor. Same as the default `Tensor`.
pub type Tensor64 = tensor::Tensor<f64>;
