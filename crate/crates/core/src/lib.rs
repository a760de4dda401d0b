//! Knowledge-distillation laboratory: a small autodiff engine, miniature
//! transformers, prediction and hidden-state matching with pluggable
//! layer-selection strategies, an angle diagnostic over teacher layers, and
//! a sweep harness.

// `!(x > 0.0)` is how configs reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distill;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod models;
pub mod optim;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
