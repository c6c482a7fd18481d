use std::fmt;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Misconfiguration: mismatched shapes, invalid layer sizes, bad resolutions.
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse, e.g. calling backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data failed a validation contract (non-watertight mesh,
    /// non-constant Reynolds channel, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Malformed binary file; `offset` locates the first offending byte.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// A computation produced a non-finite value; `what` names the tensor.
    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    /// Loss cannot be evaluated on this sample (e.g. no fluid elements).
    #[error("degenerate sample: {0}")]
    Degenerate(String),

    /// Metric is mathematically undefined for this input.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape_mismatch(op: &str, detail: fmt::Arguments<'_>) -> Self {
        Error::Config(format!("{op}: shape mismatch: {detail}"))
    }

    /// CLI exit code convention: 2 for usage/config problems, 1 for
    /// runtime and numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) | Error::Validation(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
