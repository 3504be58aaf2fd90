//! Dual-stream fovea localization: data handling, network, training and evaluation.

pub mod backbone;
pub mod bti;
pub mod config;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod model;

pub use bifuser_tensor::{Scalar, Tensor};
pub use config::{RunConfig, Variant};
pub use error::{NetError, NetResult};
pub use eval::{count_flops, export_attention, r_rule, FlopsBreakdown, RRuleReport};
pub use imaging::{CanonicalSample, FoveaAnnotation, Point, RawSample};
pub use model::{BiFuser, InputMode, ModelConfig, ModelError, TrainConfig};

pub type BiFuser32 = BiFuser<f32>;
pub type BiFuser64 = BiFuser<f64>;
