use thiserror::Error;

use crate::flory::FloryTrajectory;

pub type Result<T> = std::result::Result<T, CoagError>;

/// Why a deterministic solve stopped before reaching `t_end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbortReason {
    NonFinite,
    NegativeWeight,
    StepSizeCheck,
    OverflowReached,
}

impl std::fmt::Display for AbortReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AbortReason::NonFinite => "non-finite value in state",
            AbortReason::NegativeWeight => "negative weight below clamp threshold",
            AbortReason::StepSizeCheck => "step-halving check exceeded tolerance",
            AbortReason::OverflowReached => "mass reached the truncation boundary",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum CoagError {
    #[error("invalid cluster state: {0}")]
    InvalidState(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("test function `{name}` is non-finite ({value}) at {state}")]
    NonFiniteEvaluation {
        name: String,
        state: String,
        value: f64,
    },

    #[error("test-function family is empty")]
    EmptyFamily,

    #[error("kernel rate is not a finite non-negative number ({value}) for pair {x} / {y}")]
    RateOverflow { x: String, y: String, value: f64 },

    #[error("offspring law undefined: zero rate for pair {x} / {y}")]
    ZeroRate { x: String, y: String },

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("rate cache drifted: cached {cached}, recomputed {recomputed}")]
    RateCacheDrift { cached: f64, recomputed: f64 },

    #[error("mass conservation violated after event {event}")]
    MassViolation { event: u64 },

    #[error("grid error: {0}")]
    Grid(String),

    #[error("solver aborted at t = {time}: {reason}")]
    SolverAbort {
        time: f64,
        reason: AbortReason,
        partial: Option<Box<FloryTrajectory>>,
    },

    #[error("time {t} outside trajectory range [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
