use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("time {t} outside [0, 1]")]
    TimeOutOfRange { t: f64 },

    #[error("score is singular at t = {t} (sigma = 0)")]
    Singular { t: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("batch of size {0} has no negative candidates")]
    NoNegatives(usize),

    #[error("guidance mode {0} requires a mean trajectory")]
    MissingMeanTrajectory(&'static str),

    #[error("not a checkpoint (bad magic bytes)")]
    NotACheckpoint,

    #[error("truncated checkpoint: {0}")]
    TruncatedCheckpoint(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("parse error at line {line}: {reason}")]
    Parse { line: u64, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument {
            name,
            reason: reason.into(),
        }
    }
}

pub(crate) fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}
