//! Dense tensors, seeded random streams and a small reverse-mode tape.

mod graph;
pub mod kernels;
mod real;
mod rng;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use real::{DType, Real};
pub use rng::RngState;
pub use tensor::Tensor;
