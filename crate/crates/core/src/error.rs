use serde::Serialize;
use thiserror::Error;

/// Why the sampler (or a later pipeline stage) discarded a pulse.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum RejectReason {
    /// The waveform never reaches this level.
    BelowThreshold { level: f64 },
    /// The level is crossed on one edge only (pulse truncated by the record window).
    MissingEdge { level: f64 },
    /// Noise pushed averaged crossing times out of level order.
    NonMonotonic,
    /// Peak voltage is not covered by the selection plan.
    OutsidePlan { peak_v: f64 },
    /// Reconstruction failed.
    FitFailed { message: String },
    /// Calibrated energy hit the SiPM saturation limit.
    Saturated,
}

impl RejectReason {
    /// The serialized `reason` tag.
    pub fn tag(&self) -> &'static str {
        match self {
            RejectReason::BelowThreshold { .. } => "below_threshold",
            RejectReason::MissingEdge { .. } => "missing_edge",
            RejectReason::NonMonotonic => "non_monotonic",
            RejectReason::OutsidePlan { .. } => "outside_plan",
            RejectReason::FitFailed { .. } => "fit_failed",
            RejectReason::Saturated => "saturated",
        }
    }
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RejectReason::BelowThreshold { level } => write!(f, "never reaches {level} mV"),
            RejectReason::MissingEdge { level } => {
                write!(f, "crosses {level} mV on one edge only")
            }
            RejectReason::NonMonotonic => write!(f, "crossing times out of level order"),
            RejectReason::OutsidePlan { peak_v } => {
                write!(f, "peak {peak_v} mV outside selection plan")
            }
            RejectReason::FitFailed { message } => write!(f, "fit failed: {message}"),
            RejectReason::Saturated => write!(f, "energy beyond SiPM saturation"),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("pulse rejected: {0}")]
    Rejected(RejectReason),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("fit failed: {message} (best residual {best_residual:e})")]
    Fit { message: String, best_residual: f64 },

    #[error("energy error: {0}")]
    Energy(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("plan error: {0}")]
    Plan(String),

    #[error("calibration domain error: {0}")]
    Domain(String),

    #[error("measured value {value} is at or above SiPM saturation {limit}")]
    Saturation { value: f64, limit: f64 },

    #[error("empty result: {0}")]
    Empty(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn fit(message: impl Into<String>, best_residual: f64) -> Self {
        Error::Fit {
            message: message.into(),
            best_residual,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
