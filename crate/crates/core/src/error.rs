use thiserror::Error;

use crate::stage1::SubproblemResult;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("length mismatch: expected {expected} entries, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("no user can ever offload: every task is faster to run locally")]
    AllUsersNeverOffload,

    #[error("index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("RSU price c = 0 with {active} participating users makes the MEC purchase unbounded")]
    DegenerateZeroPrice { active: usize },

    #[error("vehicle energy coefficient k_v is zero; the contract is unbounded")]
    FreeVehicleEnergy,

    #[error("the multiplier recursion needs at least two vehicle types, got {0}")]
    TooFewTypes(usize),

    #[error("stay-time distribution has no mass beyond the elapsed time {elapsed}")]
    SupportExhausted { elapsed: f64 },

    #[error("subproblem k = {} did not converge after {} iterations", .0.interval_k, .0.iterations)]
    NotConverged(Box<SubproblemResult>),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}

pub(crate) fn ensure_positive(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be finite and > 0, got {value}")))
    }
}

pub(crate) fn ensure_nonneg(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be finite and >= 0, got {value}")))
    }
}
