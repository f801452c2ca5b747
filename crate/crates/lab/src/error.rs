use std::path::PathBuf;

use vsrdistill_core::Error as CoreError;

/// Errors surfaced by the lab. Every variant maps to a distinct exit code.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("{0}")]
    Usage(String),
    #[error("unknown key in {path}: {detail}")]
    UnknownKey { path: PathBuf, detail: String },
    #[error("invalid config {path}: {detail}")]
    Invariant { path: PathBuf, detail: String },
    #[error("schema version {found} in {path} is not supported (expected {expected})")]
    Version { path: PathBuf, found: i64, expected: u32 },
    #[error("cannot parse {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed file {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("checkpoint {path} was written under a different config (hash {found}, current {expected})")]
    ConfigMismatch { path: PathBuf, found: String, expected: String },
    #[error("missing input {path}: {hint}")]
    Missing { path: PathBuf, hint: String },
    #[error("refusing to run: {0}")]
    Refused(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("acceptance check failed: {0}")]
    Check(String),
}

pub type LabResult<T> = Result<T, LabError>;

impl LabError {
    pub fn code(&self) -> i32 {
        match self {
            LabError::Usage(_) => 2,
            LabError::UnknownKey { .. } => 10,
            LabError::Invariant { .. } => 11,
            LabError::Version { .. } => 12,
            LabError::Parse { .. } => 13,
            LabError::Io { .. } => 20,
            LabError::Format { .. } => 21,
            LabError::ConfigMismatch { .. } => 22,
            LabError::Missing { .. } => 23,
            LabError::Refused(_) => 30,
            LabError::Core(CoreError::Diverged { .. }) => 41,
            LabError::Core(_) => 40,
            LabError::Check(_) => 50,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LabError::Usage(_) => "usage",
            LabError::UnknownKey { .. } => "unknown-key",
            LabError::Invariant { .. } => "invariant",
            LabError::Version { .. } => "version",
            LabError::Parse { .. } => "parse",
            LabError::Io { .. } => "io",
            LabError::Format { .. } => "format",
            LabError::ConfigMismatch { .. } => "config-mismatch",
            LabError::Missing { .. } => "missing",
            LabError::Refused(_) => "refused",
            LabError::Core(CoreError::Diverged { .. }) => "diverged",
            LabError::Core(_) => "core",
            LabError::Check(_) => "check",
        }
    }

    /// One line for scripts: `error code=<n> kind=<k> message=<json string>`.
    pub fn machine_line(&self) -> String {
        format!("error code={} kind={} message={}", self.code(), self.kind(), serde_json::Value::String(self.to_string()))
    }
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> LabError {
    let path = path.into();
    move |source| LabError::Io { path, source }
}

pub(crate) fn format_err(path: impl Into<PathBuf>, detail: impl std::fmt::Display) -> LabError {
    LabError::Format { path: path.into(), detail: detail.to_string() }
}
