//! Crate-wide error type. Variants map onto the process exit codes used by
//! the command-line tool: I/O failures exit 1, configuration problems exit 2,
//! numeric aborts exit 3.

use std::fmt;

#[derive(Debug)]
pub enum T3Error {
    /// Filesystem or archive-format failure.
    Io(String),
    /// Invalid configuration: unknown ids, bad arities, malformed config files.
    Config(String),
    /// Malformed record payloads (undecodable images, bad labels).
    Data(String),
    /// Training aborted on a non-finite loss; carries the last good checkpoint
    /// path when one exists.
    NumericAbort { step: usize, checkpoint: Option<String> },
}

impl fmt::Display for T3Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            T3Error::Io(msg) => write!(f, "io error: {msg}"),
            T3Error::Config(msg) => write!(f, "config error: {msg}"),
            T3Error::Data(msg) => write!(f, "data error: {msg}"),
            T3Error::NumericAbort { step, checkpoint } => match checkpoint {
                Some(path) => write!(
                    f,
                    "non-finite loss at step {step}; last good checkpoint kept at {path}"
                ),
                None => write!(f, "non-finite loss at step {step}; no checkpoint written yet"),
            },
        }
    }
}

impl std::error::Error for T3Error {}

impl From<std::io::Error> for T3Error {
    fn from(e: std::io::Error) -> Self {
        T3Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for T3Error {
    fn from(e: serde_json::Error) -> Self {
        T3Error::Config(format!("json: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, T3Error>;

impl T3Error {
    /// Process exit code for the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            T3Error::Io(_) | T3Error::Data(_) => 1,
            T3Error::Config(_) => 2,
            T3Error::NumericAbort { .. } => 3,
        }
    }
}
