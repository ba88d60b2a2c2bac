use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("jump multiplier has infinite mean: eta1 = {eta1} must exceed 1")]
    InfiniteMeanJump { eta1: f64 },

    #[error("dataset format error: {0}")]
    Format(String),

    #[error("dataset truncated: expected {expected} bytes of path data, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("allocation of {bytes} bytes failed")]
    Allocation { bytes: usize },

    #[error("constraint violation at period {period}: {detail}")]
    ConstraintViolation { period: usize, detail: String },

    #[error("non-finite state at period {period}")]
    NumericBlowup { period: usize },

    #[error("non-finite gradient at iteration {iteration}")]
    NonFiniteGradient { iteration: usize },

    #[error("performance layout error: {0}")]
    Layout(String),

    #[error("auxiliary variable {xi} outside [{lo}, {hi}]")]
    XiDomain { xi: f64, lo: f64, hi: f64 },

    #[error("empty sample batch")]
    EmptyBatch,

    #[error("transition density error: {0}")]
    Density(String),

    #[error("test set shares dataset id {0:016x} with a training run")]
    DataLeak(u64),

    #[error("dataset fingerprint {found:016x} does not match the configured market ({expected:016x})")]
    FingerprintMismatch { expected: u64, found: u64 },

    #[error("study failed: {failed} of {total} runs diverged")]
    StudyFailed { failed: usize, total: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

impl Error {
    pub fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidParameter { .. }
            | Error::InfiniteMeanJump { .. }
            | Error::Layout(_)
            | Error::XiDomain { .. }
            | Error::Json(_) => ErrorKind::Config,
            Error::Format(_)
            | Error::Truncated { .. }
            | Error::DimensionMismatch(_)
            | Error::Allocation { .. }
            | Error::EmptyBatch
            | Error::DataLeak(_)
            | Error::FingerprintMismatch { .. }
            | Error::Checkpoint(_)
            | Error::Io(_) => ErrorKind::Data,
            Error::ConstraintViolation { .. }
            | Error::NumericBlowup { .. }
            | Error::NonFiniteGradient { .. }
            | Error::Density(_)
            | Error::StudyFailed { .. } => ErrorKind::Numeric,
        }
    }
}
