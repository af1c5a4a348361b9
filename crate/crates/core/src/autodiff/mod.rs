//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor)s.

mod gradcheck;
mod graph;
mod optim;

pub use gradcheck::{grad_check, grad_check_params, GradCheck};
pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig, Bound, ParamId, ParamStore};
