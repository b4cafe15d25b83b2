use std::fmt;
use std::path::PathBuf;

use dcp_core::DcpError;

/// Exit statuses; kept in sync with the `--help` footer.
pub mod exit {
    pub const CONFIG: u8 = 3;
    pub const INVALID: u8 = 4;
    pub const NUMERICAL: u8 = 5;
    pub const IO: u8 = 6;
}

#[derive(Debug)]
pub enum CliError {
    /// Unreadable or malformed config, or a bad override.
    Config(String),
    Core(DcpError),
    Output { path: PathBuf, source: std::io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Output { .. } => exit::IO,
            CliError::Core(e) => match e {
                DcpError::Io { .. } => exit::IO,
                DcpError::NoConvergence { .. }
                | DcpError::ReferenceNotConverged { .. }
                | DcpError::Linalg(_)
                | DcpError::NotSymmetric { .. } => exit::NUMERICAL,
                DcpError::Json(_) => exit::CONFIG,
                _ => exit::INVALID,
            },
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Output { path, source } => write!(f, "cannot write {}: {source}", path.display()),
        }
    }
}

impl From<DcpError> for CliError {
    fn from(e: DcpError) -> Self {
        CliError::Core(e)
    }
}
