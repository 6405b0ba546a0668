//! Linear readouts of δ from per-state feature summaries.

mod dataset;
mod ridge;
mod transfer;

pub use dataset::{grouped_split, GroupInfo, ProbeDataset, ProbeRow};
pub use ridge::{ridge_fit, ridge_fit_many, ReadoutModel};
pub use transfer::{
    affine_align, lambda_sweep, readout_metrics, sample_size_scaling, transfer_eval, ReadoutMetrics, ScalingRow,
    TransferMode, TransferRow, TransferSettings, HIGH_MARGIN, TAU_GAMMA,
};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ReadoutError {
    #[error("need at least {needed} groups, have {have}")]
    TooFewGroups { needed: usize, have: usize },
    #[error("train fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error("trace {id:?} state {t} lacks feature {feature:?}")]
    MissingFeature { id: String, t: usize, feature: String },
    #[error("feature {feature:?} has dimension {got}, expected {expected}")]
    DimensionMismatch { feature: String, got: usize, expected: usize },
    #[error("no rows")]
    Empty,
    #[error("lambda must be finite and nonnegative, got {0}")]
    BadLambda(f64),
    #[error("non-finite value in design or target")]
    NonFinite,
    #[error("prediction count {got} does not match {expected} rows")]
    LengthMismatch { got: usize, expected: usize },
    #[error("condition {0:?} not in dataset")]
    MissingCondition(String),
    #[error("mode {mode} needs at least two conditions")]
    NeedConditions { mode: String },
    #[error("alignment target is empty or has zero spread")]
    DegenerateTarget,
    #[error("predictions have zero spread; alignment degenerate")]
    DegeneratePredictions,
    #[error("linear solve failed")]
    Solve,
}
