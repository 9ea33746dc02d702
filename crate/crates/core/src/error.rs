use thiserror::Error;

/// Errors raised by model construction, calibration, and simulation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid channel {user}: {reason}")]
    InvalidChannel { user: usize, reason: String },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("belief {value} of user {user} is outside [{lo}, {hi}]")]
    UnclassifiableBelief {
        user: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("value iteration did not converge after {iterations} iterations (span residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("target fraction {target} outside attainable bracket [{lo}, {hi}]")]
    InfeasibleTarget { target: f64, lo: f64, hi: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("replication {rep_id} aborted at slot {slot}: {reason}")]
    InvariantViolation {
        rep_id: u64,
        slot: u64,
        reason: String,
    },

    #[error("degenerate denominator: relaxed throughput estimate {0} is not positive")]
    DegenerateDenominator(f64),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
