use std::fmt;
use std::io;
use std::path::Path;

/// Failure of a command. Validation errors are the caller's fault (bad
/// flags, unreadable or malformed inputs); internal errors are everything
/// else.
#[derive(Debug)]
pub enum AppError {
    Validation(String),
    Internal(String),
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    pub fn validation(msg: impl Into<String>) -> Self {
        AppError::Validation(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        AppError::Internal(msg.into())
    }

    /// Process exit status: 1 for validation errors, 2 for internal ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Validation(_) => 1,
            AppError::Internal(_) => 2,
        }
    }

    /// Reading an input failed; a missing or unreadable input is the
    /// caller's problem.
    pub fn input(path: &Path, err: io::Error) -> Self {
        AppError::Validation(format!("cannot read {}: {err}", path.display()))
    }

    pub fn output(path: &Path, err: io::Error) -> Self {
        AppError::Internal(format!("cannot write {}: {err}", path.display()))
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Validation(m) => write!(f, "error: {m}"),
            AppError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl std::error::Error for AppError {}

impl From<vrga_core::Error> for AppError {
    fn from(e: vrga_core::Error) -> Self {
        match e {
            vrga_core::Error::Divergence(_) => AppError::Internal(e.to_string()),
            _ => AppError::Validation(e.to_string()),
        }
    }
}
