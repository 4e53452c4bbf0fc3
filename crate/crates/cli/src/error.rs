use std::fmt;
use std::io;

use semem::error::ErrorKind;

/// An error carrying the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub const USAGE: u8 = 1;
pub const IO: u8 = 2;
pub const NUMERICAL: u8 = 3;

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: USAGE,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: IO,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<semem::Error> for CliError {
    fn from(e: semem::Error) -> Self {
        let code = match e.kind() {
            ErrorKind::Usage => USAGE,
            ErrorKind::Io => IO,
            ErrorKind::Numerical => NUMERICAL,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Self::io(e.to_string())
    }
}

/// Attaches a path to an I/O failure.
pub fn io_at<T>(path: &std::path::Path, r: io::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}
