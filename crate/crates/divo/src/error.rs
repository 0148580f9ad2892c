use thiserror::Error;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, Error)]
pub enum DivoError {
    /// Mismatched dimensions, unknown keys, invalid hyperparameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// API misuse that is detectable at runtime (double normalization,
    /// stepping a finished episode, sampling from an empty dataset).
    #[error("usage error: {0}")]
    Usage(String),

    /// A binary file failed validation. `offset` is the byte position at
    /// which the problem was detected.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// Non-finite value produced during numeric evaluation.
    #[error("numeric error in {context}: {message}")]
    Numeric { context: String, message: String },

    /// Non-finite gradient entry fed to the optimizer.
    #[error("training diverged: non-finite gradient at parameter index {index}")]
    Divergence { index: usize },

    /// Training loop abort: a loss went non-finite.
    #[error("training diverged at iteration {iteration}: {loss_name} is non-finite")]
    LossDiverged { iteration: u64, loss_name: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DivoError>;

impl DivoError {
    pub fn config(msg: impl Into<String>) -> Self {
        DivoError::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        DivoError::Usage(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        DivoError::Format { offset, message: msg.into() }
    }
}
