//! Tokenizer training with a Wasserstein-gradient-flow prior-matching
//! update, plus the exact tabular oracles used to verify it.

pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod error;
pub mod harness;
pub mod models;
pub mod nn;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod tvc;
pub mod wgf;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tokenizer32 = models::TokenizerState<f32>;
pub type Tokenizer64 = models::TokenizerState<f64>;
pub type ArModel32 = models::ArModel<f32>;
pub type ArModel64 = models::ArModel<f64>;
