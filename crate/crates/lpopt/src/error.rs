use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A code or index falls outside its valid range.
    #[error("range error: {0}")]
    Range(String),
    /// Tensor shapes are inconsistent or empty where data is required.
    #[error("shape error: {0}")]
    Shape(String),
    /// An input value violates a function's domain (NaN, wrong sign, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// A serialized byte stream is malformed; `offset` points at the bad spot.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },
    /// An experiment configuration cannot be resolved.
    #[error("config error: {0}")]
    Config(String),
    /// A run diverged (non-finite loss) or a numerical check failed.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
