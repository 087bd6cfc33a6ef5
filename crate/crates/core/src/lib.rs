//! Weight quantization with adaptive rounding and incoherence processing.
//!
//! The crate rounds a weight matrix `W` onto a `b`-bit integer grid while
//! minimizing the proxy loss `tr((W_hat - W) H (W_hat - W)^T)` for a
//! second-moment matrix `H`. The main entry point is [`incoherence::quip`].

pub mod analysis;
pub mod clamp_safe;
pub mod error;
pub mod incoherence;
pub mod linalg;
pub mod matio;
pub mod matrix;
pub mod rng;
pub mod rounding;

pub use error::{Error, Result};
pub use matrix::{Matrix, SymmetricPsd};
