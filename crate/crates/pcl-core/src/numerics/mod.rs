//! Minimal dense-tensor arithmetic with reverse-mode automatic differentiation.
//!
//! The building blocks are deliberately small: a host-side [`Tensor`] value
//! type, a define-by-run [`Tape`] that records primitive operations and can
//! replay them in reverse for gradients, and a central finite-difference
//! checker ([`finite_diff_check`]) used to validate every differentiable
//! operation and loss in this workspace.
//!
//! Everything is generic over a [`Scalar`] (`f32` or `f64`); the crate root
//! exports `f64` aliases, which are what the experiment harness uses.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_multi};
pub use tape::{Tape, Var};
pub use tensor::{Scalar, Tensor};

use thiserror::Error;

/// Row norms at or below this are rejected by `l2_normalize_rows`.
pub const EPS_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, NumericsError>;
