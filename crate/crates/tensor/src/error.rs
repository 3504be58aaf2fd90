use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch { op: &'static str, expected: Vec<usize>, got: Vec<usize> },
    #[error("{op}: expected rank {expected}, got {got}")]
    RankMismatch { op: &'static str, expected: usize, got: usize },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
