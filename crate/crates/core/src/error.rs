use bifuser_tensor::TensorError;
use thiserror::Error;

/// Failures raised while building or running the network.
#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("U-block of depth {depth} needs spatial size at least {min}, got {got}")]
    TooSmallForDepth { depth: usize, min: usize, got: usize },
    #[error("{0}")]
    NotDivisible(String),
    #[error("token dimension {dim} is not divisible by {heads} heads")]
    DimNotDivisible { dim: usize, heads: usize },
    #[error("non-finite values entering {0}")]
    NonFiniteInput(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type NetResult<T> = std::result::Result<T, NetError>;
