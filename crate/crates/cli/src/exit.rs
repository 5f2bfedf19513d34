//! Process exit codes and the error type that carries them.

use std::fmt;
use std::path::Path;

use rbo_core::Error;

/// Exit status of an `rbo` invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Ok = 0,
    /// Unexpected internal failure.
    Internal = 1,
    /// Bad configuration, usage or missing artifact.
    Usage = 2,
    Io = 3,
    Divergence = 4,
    /// A verification or gradient check failed.
    Verification = 5,
}

impl ExitCode {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub message: String,
}

impl CliError {
    pub fn new(code: ExitCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new(ExitCode::Usage, message)
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new(ExitCode::Io, format!("i/o error at {}: {e}", path.display()))
    }

    /// Missing input artifacts are a usage error, not an I/O failure.
    pub fn require(path: &Path, what: &str) -> Result<(), Self> {
        if path.exists() {
            Ok(())
        } else {
            Err(Self::usage(format!("missing {what}: {}", path.display())))
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. } | Error::Format { .. } => ExitCode::Usage,
            Error::Io { .. } => ExitCode::Io,
            Error::Divergence { .. } | Error::NonFinite { .. } => ExitCode::Divergence,
            _ => ExitCode::Internal,
        };
        Self::new(code, e.to_string())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn core_errors_map_to_contract_codes() {
        let cases = [
            (
                Error::Config {
                    field: "lr".into(),
                    reason: "x".into(),
                },
                2,
            ),
            (
                Error::Io {
                    path: "a".into(),
                    source: std::io::Error::other("x"),
                },
                3,
            ),
            (
                Error::Divergence {
                    iteration: 1,
                    reason: "x".into(),
                },
                4,
            ),
            (Error::NonFinite { op: "exp" }, 4),
            (Error::Detached, 1),
        ];
        for (e, code) in cases {
            assert_eq!(CliError::from(e).code.code(), code);
        }
    }
}
