use std::path::PathBuf;

use fedssf_core::container::DecodeError;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Decode { path: PathBuf, source: DecodeError },
    #[error(transparent)]
    Core(#[from] fedssf_core::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io { path: path.into(), source }
    }

    /// 0 success, 1 configuration, 2 numeric or internal failure, 3 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) | AppError::Core(fedssf_core::Error::Config(_)) => 1,
            AppError::Io { .. } | AppError::Decode { .. } | AppError::Csv(_) | AppError::Core(fedssf_core::Error::Decode(_)) => 3,
            AppError::Core(_) => 2,
        }
    }
}
