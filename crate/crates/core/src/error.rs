use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: String,
        found: String,
    },

    #[error("non-finite entry in {what}")]
    NonFinite { what: String },

    #[error("step size must be positive and finite, got {0}")]
    NonPositiveStep(f64),

    #[error("singular {what} (reciprocal condition estimate {rcond:e})")]
    Singular { what: String, rcond: f64 },

    /// The inputs fall outside the regime where the requested result is defined.
    #[error("out of regime: {0}")]
    Regime(String),

    /// A multiplier changed sign, so the expected logarithm is undefined.
    #[error("sign violation: {0}")]
    SignViolation(String),

    #[error("degenerate direction: the amplified vector vanishes for some noise pattern")]
    DegenerateDirection,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("step {step} failed: {source}")]
    StepFailed { step: usize, source: Box<Error> },
}

impl Error {
    /// True for failures caused by the mathematics of the inputs rather than by malformed input.
    pub fn is_regime(&self) -> bool {
        match self {
            Error::Singular { .. }
            | Error::Regime(_)
            | Error::SignViolation(_)
            | Error::DegenerateDirection => true,
            Error::StepFailed { source, .. } => source.is_regime(),
            _ => false,
        }
    }

    pub(crate) fn mismatch(what: impl Into<String>, expected: impl ToString, found: impl ToString) -> Self {
        Error::DimensionMismatch {
            what: what.into(),
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }
}

pub(crate) fn check_dt(dt: f64) -> Result<()> {
    if dt.is_finite() && dt > 0.0 {
        Ok(())
    } else {
        Err(Error::NonPositiveStep(dt))
    }
}
