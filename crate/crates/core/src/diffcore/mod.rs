//! Minimal reverse-mode automatic differentiation.

mod adam;
mod matrix;
mod params;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use matrix::{Matrix, Shape};
pub use params::{Bound, ParamSet};
pub use tape::{Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {}x{} vs {}x{}", .left.0, .left.1, .right.0, .right.1)]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },
    #[error("backward requires a scalar loss, got {}x{}", .0.0, .0.1)]
    NonScalarLoss(Shape),
    #[error("backward already ran on this tape")]
    AlreadyBackpropagated,
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("duplicate parameter name `{0}`")]
    DuplicateName(String),
}
