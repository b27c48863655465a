use thiserror::Error;

/// Errors raised by tensor construction and tape operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("data length {got} does not match shape {shape:?} (expected {expected})")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op} requires a tensor of rank 0 or 2, got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("gradient output must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("variables belong to different tapes")]
    ForeignTape,
}

pub type Result<T> = std::result::Result<T, AdError>;
