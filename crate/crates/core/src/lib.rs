// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod datagen;
pub mod density;
pub mod experiments;
pub mod icnn;
pub mod fused;
pub mod mixture;
pub mod training;

use thiserror::Error;

/// Errors raised while building or evaluating a model.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}
