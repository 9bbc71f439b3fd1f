use thiserror::Error;

/// Errors raised by the compute substrate.
#[derive(Debug, Error)]
pub enum NnError {
    /// A layer or model was wired with incompatible dimensions.
    #[error("configuration error: {0}")]
    Config(String),

    /// An input value violated an operation's contract.
    #[error("input error: {0}")]
    Input(String),

    /// Training step could not proceed (e.g. a gradient went non-finite).
    #[error("training error: parameter `{parameter}`: {reason}")]
    Training { parameter: String, reason: String },

    /// An API was called in a way it does not support.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
