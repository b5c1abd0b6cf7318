//! Minimal dense-tensor algebra with tape-based reverse-mode differentiation.
//!
//! Every primitive records itself on a [`Graph`] together with whatever it
//! needs for the backward pass. All arithmetic is `f64`, loops run in a fixed
//! order, and the only randomness (dropout) comes from a caller-supplied RNG,
//! so a forward/backward pair is bit-reproducible for a given seed.
//!
//! GeLU uses the exact `x · Φ(x)` form (via `erf`), not the tanh approximation.

mod check;
mod error;
mod graph;
mod kernels;
mod ops;
mod tensor;

pub use check::{grad_check, relative_error, Discrepancy, GradCheckOptions, GradCheckReport, Parameters};
pub use error::{Result, TensorError};
pub use graph::{ContrastiveTerm, FlopCount, Gradients, Graph, Var};
pub use tensor::Tensor;
