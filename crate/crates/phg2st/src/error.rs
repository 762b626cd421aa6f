//! Crate-wide error type and the process exit codes derived from it.

use thiserror::Error;

/// All failures surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shape disagreement between tensors participating in one operation.
    #[error("dimension mismatch in {op}: {details}")]
    Dim { op: &'static str, details: String },

    /// A scalar argument outside its documented domain.
    #[error("invalid parameter {name}: {details}")]
    Param { name: &'static str, details: String },

    /// Misuse of an API contract (e.g. backward on a non-scalar).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Underlying filesystem failure, annotated with the path involved.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its bytes do not parse as the expected format.
    #[error("format error in {path}: {details}")]
    Format { path: String, details: String },

    /// Parsed data that violates a cross-field consistency rule.
    #[error("validation error: {0}")]
    Validation(String),

    /// Run configuration that cannot be used as given.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint bytes that cannot be loaded or do not match the model.
    #[error("checkpoint error in {path}: {details}")]
    Checkpoint { path: String, details: String },

    /// A non-finite value appeared where the math requires finite numbers.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// Process exit code for the CLI: 1 for numerical blow-ups, 3 for
    /// checkpoint problems, 2 for every other (config/input) failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 1,
            Error::Checkpoint { .. } => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io { path: path.display().to_string(), source }
    }

    pub(crate) fn format(path: &std::path::Path, details: impl Into<String>) -> Self {
        Error::Format { path: path.display().to_string(), details: details.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
