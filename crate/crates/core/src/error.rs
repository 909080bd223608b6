//! Error type shared across the crate.

use std::fmt;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by architecture parsing, model construction, training and
/// evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Malformed architecture text; carries a line number and description.
    Parse { line: usize, msg: String },
    /// Structurally invalid architecture graph (cycles, dangling edges, ...).
    Graph(String),
    /// Invalid configuration value.
    Config(String),
    /// Tensor shape mismatch.
    Shape(String),
    /// Requested item does not exist or counts do not line up.
    Invalid(String),
    /// Path sampling could not satisfy the distinctness constraint.
    Infeasible(String),
    /// Dataset ingestion failure (missing/corrupt files, bad labels).
    Data(String),
    /// Checkpoint container failure (format, hash mismatch, io).
    Checkpoint(String),
    /// Underlying io error, stringified to keep the type clonable.
    Io(String),
}

impl Error {
    /// Stable machine-readable category used by the CLI for exit reporting.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Graph(_) => "graph",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::Invalid(_) => "invalid",
            Error::Infeasible(_) => "infeasible",
            Error::Data(_) => "data",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Parse { line, msg } => write!(f, "parse error at line {line}: {msg}"),
            Error::Graph(m) => write!(f, "graph error: {m}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Shape(m) => write!(f, "shape mismatch: {m}"),
            Error::Invalid(m) => write!(f, "invalid request: {m}"),
            Error::Infeasible(m) => write!(f, "infeasible: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
            Error::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
            Error::Io(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
