//! Differential privacy for complex-valued functions.
//!
//! The crate provides the complex Gaussian mechanism with its (ε, δ) and
//! Rényi accounting, a reverse-mode Wirtinger-calculus autodiff tape for
//! complex-valued networks, and private SGD that clips conjugate gradients.

// NaN-rejecting range checks are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod accountant;
pub mod ctensor;
pub mod data;
pub mod error;
pub mod mechanism;
pub mod nn;
pub mod rng;
pub mod trainer;
pub mod wirtinger;

pub use ctensor::{CTensor, C64};
pub use error::{Error, Result};
pub use rng::Rng;
pub use wirtinger::{ConjugateGradient, Tape, Var};
