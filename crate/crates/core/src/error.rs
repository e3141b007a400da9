use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A function argument is outside its domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Parameters that cannot work together (band limit, radius, accuracy, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// A basis index that the truncated basis does not retain.
    #[error("basis index (k={k}, q={q}) is not retained")]
    Index { k: usize, q: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    /// Malformed or truncated file contents.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Data does not support the requested estimate (e.g. no signal above noise).
    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
