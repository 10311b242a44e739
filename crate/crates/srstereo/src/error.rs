use std::io;

use thiserror::Error;

pub type AppResult<T> = Result<T, AppError>;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] srstereo_core::Error),
    #[error("format: {0}")]
    Format(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("check failed: {0}")]
    Acceptance(String),
}

impl AppError {
    /// Process exit code: 1 usage, 2 contract or input violation,
    /// 3 failed check.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => 1,
            AppError::Core(_) | AppError::Format(_) | AppError::Io(_) => 2,
            AppError::Acceptance(_) => 3,
        }
    }
}

impl From<csv::Error> for AppError {
    fn from(e: csv::Error) -> Self {
        AppError::Format(e.to_string())
    }
}
