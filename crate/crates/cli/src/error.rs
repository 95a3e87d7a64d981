use thiserror::Error;

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] fusenet_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// One or more blocks exceeded the gradient-check tolerance.
    #[error("gradient check failed for: {0}")]
    GradCheck(String),
}

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

impl CliError {
    /// 2 for numerical failures (NaN, failed gradient check), 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(fusenet_core::Error::Numerical(_)) | CliError::GradCheck(_) => EXIT_NUMERICAL,
            _ => EXIT_USAGE,
        }
    }
}
