use std::fmt;
use std::io;

/// Errors surfaced by commands, each tied to an exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or unreadable input (exit 1).
    Usage(String),
    /// Malformed config document (exit 1).
    Parse(String),
    /// Well-formed config describing an invalid model or run (exit 2).
    Invalid(String),
    /// A simulated run disagreed with the analytics (exit 3).
    ComparisonFailed(String),
    Io(io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Usage(_) | Self::Parse(_) | Self::Io(_) => 1,
            Self::Invalid(_) => 2,
            Self::ComparisonFailed(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) => write!(f, "usage error: {m}"),
            Self::Parse(m) => write!(f, "parse error: {m}"),
            Self::Invalid(m) => write!(f, "invalid: {m}"),
            Self::ComparisonFailed(m) => write!(f, "comparison failed: {m}"),
            Self::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Self::Io(e)
    }
}
