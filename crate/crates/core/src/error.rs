use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value is outside its allowed range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// The mean-predictor radicand `1 - abar_{t-1} - sigma_t^2` went negative.
    #[error("schedule inconsistency at t={t}: sqrt(1 - abar_(t-1) - sigma_t^2) has negative radicand {radicand}")]
    ScheduleInconsistency { t: usize, radicand: f64 },

    #[error("inversion undefined: sigma_t = 0 at t={t} (eta must be > 0)")]
    InversionUndefined { t: usize },

    #[error("unknown condition: {0}")]
    UnknownCondition(String),

    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("incompatible artifact: {0}")]
    Compatibility(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    /// True for errors that come from a numeric constraint rather than bad
    /// input shape or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::ScheduleInconsistency { .. }
                | Error::InversionUndefined { .. }
                | Error::Divergence { .. }
        )
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}
