//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The tape is rebuilt for every forward pass. Ops that appear in the model
//! (convolutions, the state-space scan, Haar transforms, Gaussian windows)
//! carry hand-written adjoints; [`check`] verifies them against central
//! finite differences.

pub mod check;
mod graph;
pub mod kernels;

pub use graph::{Gradients, Graph, Var};
pub(crate) use graph::softplus;
pub use kernels::ConvSpec;

#[cfg(test)]
mod tests;
