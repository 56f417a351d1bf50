//! Reverse-mode automatic differentiation over dense NCHW tensors.
//!
//! Everything is generic over [`Scalar`] so the same network code trains in
//! `f32` and is gradient-checked in `f64`.

pub mod error;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use error::{Result, TensorError};
pub use graph::{BnStats, Grads, Graph, Observed, Var};
pub use kernels::ConvGeom;
pub use optim::{Adam, Sgd};
pub use params::{he_normal, Bound, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
