use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value{}: {message}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Numeric { step: Option<usize>, message: String },
}

impl Error {
    pub fn numeric(message: impl Into<String>) -> Self {
        Error::Numeric { step: None, message: message.into() }
    }

    /// Attach a step index to a numeric error; other variants pass through.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::Numeric { message, .. } => Error::Numeric { step: Some(step), message },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
