use thiserror::Error;

/// Errors surfaced by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value {value} at index {index} is outside [{lower}, {upper}]")]
    OutOfRange {
        index: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },

    #[error("integration diverged in cycle {cycle} at t = {t} ms")]
    IntegrationDiverged { cycle: usize, t: f64 },

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("degenerate reference: sample {index} is zero")]
    DegenerateReference { index: usize },

    #[error("training diverged: non-finite residual at case {case}, t = {t} ms")]
    DivergedTraining { case: usize, t: f64 },

    #[error("too many failures: {failed} of {total} ({what})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        what: String,
    },

    #[error("input validation failed: {0}")]
    Validation(String),

    #[error("internal contract violated: {0}")]
    Contract(String),

    #[error("model file: {0}")]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Reasons a model file is rejected on load.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("shape inconsistency: {0}")]
    ShapeMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;
