//! Multiplication-light training for multilayer perceptrons.
//!
//! The forward pass runs on stochastically sampled binary or ternary
//! weights, so every product is a sign change. The backward pass can
//! quantize each layer input to a signed power of two, turning the
//! weight-update outer product into exponent adjustments. A full-precision
//! path is kept alongside as the baseline, and every kernel reports its
//! arithmetic to a [`instrument::MultCounter`].

#[macro_use]
mod simd;

pub mod data;
pub mod error;
pub mod instrument;
pub mod nn;
pub mod quantize;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Matrix, TernaryMatrix};
