//! Dense `f64` tensors and a small reverse-mode autodiff graph.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many};
pub use graph::{Gradients, Graph, NodeId};
pub use tensor::Tensor;

