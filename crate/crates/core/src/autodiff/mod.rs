//! Reverse-mode differentiation over dense tensors, plus tensor-level
//! wrappers for one-off evaluation and the finite-difference checker.

mod graph;
pub mod gradcheck;
pub mod kernels;
pub mod ops;

pub use graph::{sigmoid, Graph, Var};
