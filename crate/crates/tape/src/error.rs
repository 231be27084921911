use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("missing gradient for trainable parameter `{name}`")]
    MissingGradient { name: String },

    #[error("{0}")]
    InvalidArgument(String),
}

impl TapeError {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        TapeError::ShapeMismatch { op, left: left.to_vec(), right: right.to_vec() }
    }
}

pub type Result<T, E = TapeError> = std::result::Result<T, E>;
