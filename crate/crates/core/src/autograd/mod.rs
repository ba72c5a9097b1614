//! Dense tensors and reverse-mode automatic differentiation.

mod graph;
mod tensor;

pub use graph::{gelu_tanh, Elementwise, Gradients, Graph, Var};
pub(crate) use graph::mm;
pub use tensor::Tensor;
