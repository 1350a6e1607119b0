//! Dense `f64` tensors and a tape-based reverse-mode differentiator.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, Var};
pub use tensor::{softmax_t, Tensor};

pub(crate) use tensor::softmax_into;
