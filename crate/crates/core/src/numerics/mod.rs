//! Dense `f64` tensors, reverse-mode differentiation and a finite-difference oracle.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{compare_gradients, finite_diff_check, GradComparison};
pub use graph::{softmax, Graph, Var};
pub use tensor::Tensor;
