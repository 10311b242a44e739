//! Tape-based reverse-mode differentiation over [`Tensor`](crate::tensor::Tensor)s.

mod graph;
pub mod ops;

pub use graph::{Backward, Binder, Gradients, Graph, Var};
