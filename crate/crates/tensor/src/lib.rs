//! Minimal tensor and reverse-mode autodiff engine.
//!
//! Just enough machinery to train small convolutional and windowed-attention
//! restoration networks on a CPU: NCHW convolutions via im2col + GEMM,
//! pooling, upsampling, batched matmul, softmax, layer norm, gather-based
//! permutations, Adam, and a tar checkpoint container.

mod adam;
pub mod checkpoint;
mod conv;
mod graph;
mod params;
mod real;
mod tensor;

pub use adam::Adam;
pub use conv::conv_out_size;
pub use graph::{Gradients, Graph, Var};
pub use params::{param_rng, Init, ParamId, ParamSet};
pub use real::{gemm, MatMut, MatRef, Real};
pub use tensor::Tensor;
