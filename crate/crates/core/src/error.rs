use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("NaN argument passed to {0}")]
    NanInput(&'static str),

    #[error("interval bounds out of order: a = {a}, b = {b}")]
    IntervalOrder { a: f64, b: f64 },

    #[error("invalid thresholds: {0}")]
    InvalidThresholds(String),

    #[error("label {label} outside 1..={num_classes}")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("interval probability underflows for class {class}")]
    Degenerate { class: usize },

    #[error("{what} did not converge after {iterations} iterations (last residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("no sign change found while bracketing {0}")]
    NoBracket(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at step {step}: {message}")]
    Diverged { step: usize, message: String },

    #[error("stale forward cache (cache generation {cache}, params generation {params})")]
    StaleCache { cache: u64, params: u64 },

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("file not found: {0}")]
    MissingFile(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
