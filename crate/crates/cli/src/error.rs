use std::fmt;
use std::path::Path;

use repflow::Error;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_MALFORMED: u8 = 3;
pub const EXIT_DIMENSIONS: u8 = 4;
pub const EXIT_WRITE: u8 = 5;
pub const EXIT_NUMERICAL: u8 = 6;
pub const EXIT_GRADCHECK: u8 = 7;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        CliError {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }

    /// Failure while reading `path`: I/O problems count as bad input.
    pub fn reading(path: &Path, e: Error) -> Self {
        match e {
            Error::Io(io) => Self::new(
                EXIT_MALFORMED,
                format!("cannot read {}: {io}", path.display()),
            ),
            other => Self::from(other).context(path),
        }
    }

    pub fn writing(path: &Path, e: Error) -> Self {
        match e {
            Error::Io(io) => {
                Self::new(EXIT_WRITE, format!("cannot write {}: {io}", path.display()))
            }
            other => Self::from(other).context(path),
        }
    }

    fn context(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::ShapeMismatch(_) => EXIT_DIMENSIONS,
            Error::Malformed { .. } => EXIT_MALFORMED,
            Error::InvalidArgument(_) | Error::Empty(_) => EXIT_USAGE,
            Error::NonFinite(_) | Error::NonFiniteGradient(_) | Error::Diverged { .. } => {
                EXIT_NUMERICAL
            }
            Error::Io(_) => EXIT_WRITE,
        };
        CliError::new(code, e.to_string())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;
