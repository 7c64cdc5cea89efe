use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] varprune_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed file at byte {offset}: {message}")]
    Format { path: PathBuf, offset: usize, message: String },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }

    /// Process exit code: 1 config, 2 numeric failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        use varprune_core::Error as E;
        match self {
            HarnessError::Config(_) => 1,
            HarnessError::Core(E::Numeric { .. }) => 2,
            HarnessError::Core(_) => 1,
            HarnessError::Io { .. } | HarnessError::Format { .. } | HarnessError::Csv { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
