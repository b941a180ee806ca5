use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        expected: String,
        actual: String,
    },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("class index {index} out of range for {len} logits")]
    Index { index: usize, len: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Dimension {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
