//! Dense tensors, recorded operations, and reverse-mode gradients.

mod dense;
mod gradcheck;
mod graph;
pub mod kernels;

pub use dense::Tensor;
pub use gradcheck::{finite_diff_entries, finite_diff_grad, max_grad_violation};
pub use graph::{AttentionShape, ElementwiseOp, GradStore, Graph, Var};
