//! Parameter-efficient fine-tuning of a small encoder-decoder transformer for
//! structured data-to-text generation.
//!
//! Numerical code is generic over [`scalar::Scalar`]; training runs in `f32`
//! and gradient checks in `f64`. The aliases below fix the element type.

pub mod audit;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod peft;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type ParamStore32 = tensor::ParamStore<f32>;
pub type ParamStore64 = tensor::ParamStore<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type Model32 = model::Seq2SeqModel<f32>;
pub type Model64 = model::Seq2SeqModel<f64>;
pub type Attached32 = peft::AttachedModel<f32>;
pub type Attached64 = peft::AttachedModel<f64>;
