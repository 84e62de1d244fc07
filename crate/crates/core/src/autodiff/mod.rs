//! Dynamic-graph reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor)s.

mod grad_check;
mod graph;

pub use grad_check::{grad_check, GradCheckReport};
pub(crate) use graph::softplus;
pub use graph::{CustomBackward, Graph, Var};
