//! Application errors mapped onto the stable CLI exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AppError {
    #[error("config error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
}

impl AppError {
    /// Exit codes are a contract: 0 ok, 2 config, 3 I/O, 4 numeric,
    /// 5 metric undefined.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Io(_) => 3,
            AppError::Numeric(_) => 4,
            AppError::UndefinedMetric(_) => 5,
        }
    }
}

impl From<pdd_core::Error> for AppError {
    fn from(e: pdd_core::Error) -> Self {
        use pdd_core::Error as E;
        match e {
            E::Config(msg) => AppError::Config(msg),
            E::UndefinedMetric(msg) => AppError::UndefinedMetric(msg),
            E::NonFinite { .. } => AppError::Numeric(e.to_string()),
            other => AppError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, AppError>;
