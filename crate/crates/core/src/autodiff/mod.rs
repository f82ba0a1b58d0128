//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{grad_check, grad_check_coords, grad_check_floored, FD_STEP};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
