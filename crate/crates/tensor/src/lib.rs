//! Minimal dense tensors with reverse-mode autodiff, sized for small
//! convolutional UNets on a CPU.
//!
//! Image tensors are NHWC. Every op that mixes channels acts on the trailing
//! axis, so 1×1 convolutions are plain [`Graph::linear`] calls.

mod gemm;
mod graph;
pub mod kernels;
mod params;
mod real;
mod tensor;

pub use gemm::{gemm, Mat, MatMut};
pub use graph::{Gradients, Graph, Var};
pub use params::{Param, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("graph error: {0}")]
    Graph(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
