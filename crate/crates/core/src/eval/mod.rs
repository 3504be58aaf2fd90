//! R-rule metrics, analytic FLOPs accounting and attention-map export.

mod attention;
mod flops;
mod rrule;

use thiserror::Error;

pub use attention::{attention_heatmap, channel_max, export_attention, normalize_min_max, OVERLAY_ALPHA};
pub use flops::{
    conv_macs, count_flops, deviation_percent, rsu_macs, BtiFlops, FlopsBreakdown, PUBLISHED_TOKEN_FUSER_GFLOPS, PUBLISHED_TOKEN_LEARNER_GFLOPS,
    PUBLISHED_TOTAL_GFLOPS,
};
pub use rrule::{r_rule, r_rule_stratified, RRuleReport, StratumReport, R_THRESHOLDS};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{preds} predictions for {gts} annotations")]
    LengthMismatch { preds: usize, gts: usize },
    #[error("annotation {index} has optic-disc radius {radius}; it must be positive")]
    InvalidRadius { index: usize, radius: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type EvalResult<T> = std::result::Result<T, EvalError>;
