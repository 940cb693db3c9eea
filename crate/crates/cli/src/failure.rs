//! Process exit codes.

use std::fmt;
use std::path::Path;

use dropvid::Error;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_MISSING: u8 = 3;
pub const EXIT_SHAPE: u8 = 4;
pub const EXIT_MISMATCH: u8 = 5;
pub const EXIT_OTHER: u8 = 1;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(EXIT_USAGE, message)
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new(EXIT_OTHER, format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Missing(_) | Error::Backend(_) => EXIT_MISSING,
            Error::Padding { .. } | Error::Shape(_) | Error::Window(_) => EXIT_SHAPE,
            Error::Mismatch(_) => EXIT_MISMATCH,
            Error::Config(_) | Error::Invalid(_) => EXIT_USAGE,
            _ => EXIT_OTHER,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}
