//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad caller input: shape mismatches, unsorted times, invalid configs.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A configuration that is syntactically valid but not supported.
    #[error("unsupported configuration: {0}")]
    UnsupportedConfig(String),

    /// The integrator could not finish; `t` is the last reached time and
    /// `state` the state there.
    #[error("integration failed at t={t}: {reason}")]
    Integration {
        t: f64,
        state: Vec<f64>,
        reason: String,
    },

    /// The training loss became non-finite at the given window time index.
    #[error("non-finite loss at window time index {time_index}")]
    NonFiniteLoss { time_index: usize },

    /// Training aborted.
    #[error("training failed at step {step}: {reason}")]
    Training { step: usize, reason: String },

    /// Inversion loss increased for too many consecutive steps.
    #[error("inversion diverged: loss increased for {steps} consecutive steps")]
    InversionDiverged { steps: usize },

    /// A file failed to parse or validate.
    #[error("{path}: {reason}")]
    Parse { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True when the failure is numerical (integration, training, inversion)
    /// rather than bad input. The CLI maps numerical failures to exit code 2
    /// and everything else to exit code 1.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Integration { .. }
                | Error::NonFiniteLoss { .. }
                | Error::Training { .. }
                | Error::InversionDiverged { .. }
        )
    }
}
