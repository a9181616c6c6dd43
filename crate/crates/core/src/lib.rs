//! Sliced recursive vision transformers: recursive attention blocks with
//! sliced group self-attention, non-linear projection layers and learnable
//! residual coefficients, plus exact cost accounting and a small training
//! harness.

// `!(x > 0.0)` is how NaN gets rejected; tape ops return `Result` and so
// cannot be the operator traits.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::should_implement_trait)]

pub mod accounting;
pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod init;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type ParamStore32 = tensor::ParamStore<f32>;
pub type ParamStore64 = tensor::ParamStore<f64>;
pub type Model32 = model::SretModel<f32>;
pub type Model64 = model::SretModel<f64>;
pub type Checkpoint32 = checkpoint::Checkpoint<f32>;
pub type Checkpoint64 = checkpoint::Checkpoint<f64>;
