use std::io;
use std::path::{Path, PathBuf};

use pyrabox_core::Error as CoreError;

/// Malformed input files.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("line {line}: {msg}")]
    Line { line: usize, msg: String },
    #[error("bad magic at offset 0: expected {expected:?}, found {found:?}")]
    BadMagic { expected: &'static str, found: String },
    #[error("truncated input: {0}")]
    Truncated(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl FormatError {
    pub(crate) fn line(line: usize, msg: impl Into<String>) -> Self {
        FormatError::Line { line, msg: msg.into() }
    }
}

/// Everything the executable can fail with, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Format { path: PathBuf, source: FormatError },
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Format { .. } | AppError::Data(_) => 2,
            AppError::Numeric(_) => 3,
        }
    }

    pub fn format(path: &Path, source: FormatError) -> Self {
        AppError::Format { path: path.to_path_buf(), source }
    }

    pub fn io(path: &Path, source: io::Error) -> Self {
        AppError::format(path, FormatError::Io(source))
    }
}

impl From<CoreError> for AppError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_) => AppError::Usage(e.to_string()),
            CoreError::Numeric(_) => AppError::Numeric(e.to_string()),
            CoreError::Dimension(_) | CoreError::Contract(_) => AppError::Data(e.to_string()),
        }
    }
}

pub type AppResult<T> = Result<T, AppError>;
