use thiserror::Error;

pub type Result<T> = std::result::Result<T, SeliError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeliError {
    #[error("invalid imbalance parameters: {0}")]
    InvalidSpec(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("dual certificate fails at entry ({row}, {col}): {reason}")]
    Certificate {
        row: usize,
        col: usize,
        reason: String,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite objective at epoch {epoch}")]
    NonFinite { epoch: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for SeliError {
    fn from(e: std::io::Error) -> Self {
        SeliError::Io(e.to_string())
    }
}

impl From<csv::Error> for SeliError {
    fn from(e: csv::Error) -> Self {
        SeliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for SeliError {
    fn from(e: serde_json::Error) -> Self {
        SeliError::Config(e.to_string())
    }
}
