//! Two-factor commitment/cursor factorization.
//!
//! A one-hidden-layer tanh encoder maps standardized features to `(u, v)`,
//! each 8-dimensional. Linear heads predict δ from `u` and progress from `v`;
//! a batch least-squares R² penalty discourages δ in `v` and progress in `u`.

mod net;
mod roles;

pub use net::{fit_factorizer, Control, FactorConfig, FactorEncoder, TrainSummary, ENCODER_VERSION};
pub use roles::{factor_role_report, multi_seed_roles, MultiSeedRoles, RoleReport, RoleSettings, SeedRoles};

use thiserror::Error;

use crate::bootstrap::BootstrapError;
use crate::readout::ReadoutError;

#[derive(Debug, Error, PartialEq)]
pub enum FactorError {
    #[error("training diverged (non-finite loss) at epoch {epoch} with seed {seed}")]
    NonFinite { seed: u64, epoch: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("encoder expects {expected} features, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("unsupported encoder version {0}")]
    Version(u32),
    #[error("need at least {needed} test groups, have {have}")]
    TooFewGroups { needed: usize, have: usize },
    #[error(transparent)]
    Readout(#[from] ReadoutError),
    #[error(transparent)]
    Bootstrap(#[from] BootstrapError),
    #[error("encoder serialization: {0}")]
    Serde(String),
}
