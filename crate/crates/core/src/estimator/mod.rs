//! Propensity-score fits over intervention trees and IPW target estimation.

pub mod fit;
pub mod moment;
pub mod target;

use thiserror::Error;

use crate::numerics::NumericsError;

pub use fit::{design_vector, fit_forest, DesignSpec, FitRegistry, PropensityFit};
pub use moment::{MomentSpec, Term};
pub use target::{
    closure, complete_case_estimate, estimate, target_estimate, Diagnostics, EstimateOptions, EstimationResult, StackedSystem,
    WaldTest,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimationError {
    #[error("X{var} is missing on row {row} but is a parent in the design")]
    MissingParentValue { row: usize, var: usize },
    #[error("no fit available for R{0}")]
    FitMissing(usize),
    #[error("fitted propensity of R{indicator} is not positive on row {row}")]
    NonPositivePropensity { indicator: usize, row: usize },
    #[error("{} did not converge after {iterations} iterations", label(*.indicator))]
    NonConvergence { indicator: Option<usize>, iterations: usize },
    #[error("fitted propensities of R{indicator} separate to 0 or 1")]
    Separation { indicator: usize },
    #[error("R{indicator} has {rows} fit rows, needs at least {needed}")]
    InsufficientRows { indicator: usize, rows: usize, needed: usize },
    #[error("functional is not identified: its closure reaches R{0}")]
    NotIdentifiedFunctional(usize),
    #[error("no row carries positive weight")]
    DegenerateWeights,
    #[error("invalid moment: {0}")]
    InvalidMoment(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{}: {source}", label(*.indicator))]
    Numerics { indicator: Option<usize>, source: NumericsError },
    #[error("internal consistency check failed: {0}")]
    Internal(String),
}

fn label(indicator: Option<usize>) -> String {
    match indicator {
        Some(k) => format!("propensity fit of R{k}"),
        None => "target equation".to_string(),
    }
}
