//! Dense tensors with tape-based reverse-mode differentiation and the
//! layers needed by convolutional/transformer segmentation networks.
//!
//! All math is generic over [`Scalar`] (`f32` and `f64`); training runs in
//! single precision while gradient verification runs in double precision.

pub mod error;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use kernels::{Border, Conv2dSpec, PoolSpec};
pub use nn::{apply_bn_updates, BatchNorm2d, BnUpdate, Conv2d, Graph, LayerNorm, Linear, ParamBuilder};
pub use optim::{Adam, CosineAnnealing};
pub use params::{ParamEntry, ParamId, ParamKind, ParamStore};
pub use scalar::Scalar;
pub use tape::{sigmoid, Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
