//! Reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use graph::{Graph, Var, MASKED_LOGIT};
pub use tensor::Tensor;
