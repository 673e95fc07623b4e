//! Command-line pipeline around `rmapf-core`: configuration, file
//! layout, parallel execution, and report rendering.

pub mod config;
pub mod io;
pub mod pool;
pub mod commands;
pub mod svg;

/// Error split that maps onto the process exit codes: configuration
/// problems exit with 2, runtime failures with 3.
#[derive(Debug)]
pub enum AppError {
    Validation(String),
    Runtime(String),
}

impl std::fmt::Display for AppError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AppError::Validation(m) => write!(f, "invalid configuration: {m}"),
            AppError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for AppError {}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Validation(_) => 2,
            AppError::Runtime(_) => 3,
        }
    }

    pub fn validation(msg: impl Into<String>) -> AppError {
        AppError::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> AppError {
        AppError::Runtime(msg.into())
    }
}

pub type AppResult<T> = Result<T, AppError>;
