use std::fmt;
use std::path::Path;

/// A command failure, classified by the exit status it maps to.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, malformed input files, failed validation: exit 2.
    Usage(String),
    /// Everything else (I/O, numerical failure): exit 1.
    Internal(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        CliError::Internal(msg.into())
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        CliError::Internal(format!("{}: {err}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Internal(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) | CliError::Internal(msg) => f.write_str(msg),
        }
    }
}

impl std::error::Error for CliError {}

/// Library errors from validated inputs are the caller's fault, except for
/// numerical breakdowns.
impl From<cstk_core::Error> for CliError {
    fn from(err: cstk_core::Error) -> Self {
        match err {
            cstk_core::Error::SvdFailed | cstk_core::Error::Pipeline(_) => {
                CliError::Internal(err.to_string())
            }
            _ => CliError::Usage(err.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
