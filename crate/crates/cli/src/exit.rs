use std::process::ExitCode;

use cuetrack::Error;
use thiserror::Error;

pub const USAGE: u8 = 2;
pub const IO: u8 = 3;
pub const VALIDATION: u8 = 4;
pub const NUMERIC: u8 = 5;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Lib(#[from] Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(Error::Io(e))
    }
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => USAGE,
            CliError::Validation(_) => VALIDATION,
            CliError::Numeric(_) => NUMERIC,
            CliError::Lib(e) => match e {
                Error::Io(_) => IO,
                Error::Numeric(_) | Error::Training(_) => NUMERIC,
                Error::Shape(_)
                | Error::EmptyText
                | Error::Range { .. }
                | Error::Config(_)
                | Error::Input(_)
                | Error::Format(_) => VALIDATION,
            },
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code())
    }
}
