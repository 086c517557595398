use std::fmt;

use adaptive_lqr::Error;

/// Documented process exit codes.
pub mod exit {
    pub const SUCCESS: i32 = 0;
    pub const IO: i32 = 1;
    pub const INVALID_CONFIG: i32 = 2;
    pub const INSUFFICIENT_DATA: i32 = 3;
    pub const NUMERIC_FAILURE: i32 = 4;
}

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn io(context: &str, err: std::io::Error) -> Self {
        Self::new(exit::IO, format!("{context}: {err}"))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        let code = match &err {
            Error::InvalidInput(_) => exit::INVALID_CONFIG,
            Error::NoData | Error::InsufficientData(_) => exit::INSUFFICIENT_DATA,
            Error::NotStabilizable { .. } | Error::Numeric(_) | Error::Diverged { .. } => {
                exit::NUMERIC_FAILURE
            }
        };
        Self::new(code, err.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
