//! Categorical-feature-conditioned listen-attend-spell speech recognition,
//! built on a small tape-based autograd engine.

pub mod autograd;
pub mod bmuf;
pub mod bpe;
pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod harness;
pub mod eval;
pub mod model;
pub mod params;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Graph64 = autograd::Graph<f64>;
pub type Graph32 = autograd::Graph<f32>;
pub type LasModel64 = model::LasModel<f64>;
pub type LasModel32 = model::LasModel<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
