use thiserror::Error;

/// Errors raised anywhere in the emulation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("mode index {mode} out of range for an order-{order} tensor")]
    ModeIndex { mode: usize, order: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("value outside the admissible domain: {0}")]
    Domain(String),

    #[error("matrix factorization failed: {0}")]
    Factorization(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("sampling failed in chain {chain} at iteration {iteration}: {message}")]
    Sampling {
        chain: usize,
        iteration: usize,
        message: String,
    },

    #[error("diagnostic unavailable: {0}")]
    Diagnostic(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed data file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
