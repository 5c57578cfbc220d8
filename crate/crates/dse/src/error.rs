use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
///
/// The variants map one-to-one onto the process exit codes used by the CLI:
/// contract violations exit with 1, I/O problems with 2 and configuration
/// problems with 3.
#[derive(Debug, Error)]
pub enum DseError {
    /// A caller broke an operation's precondition (shape mismatch, bad range...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Input data is malformed (non-finite values, too small for a window...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A spec or config document is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },

    /// Training or optimization produced a non-finite or diverging loss.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl DseError {
    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        DseError::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            DseError::Contract(_) | DseError::InvalidInput(_) | DseError::Numerical(_) => 1,
            DseError::Tensor(_) => 1,
            DseError::Io { .. } => 2,
            DseError::Config(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, DseError>;

macro_rules! contract {
    ($($arg:tt)*) => {
        $crate::error::DseError::Contract(format!($($arg)*))
    };
}

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::DseError::Config(format!($($arg)*))
    };
}

pub(crate) use config_err;
pub(crate) use contract;
