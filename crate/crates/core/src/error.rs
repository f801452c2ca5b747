use alloc::string::String;

/// Failure modes shared by every module of the core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("training diverged in phase `{phase}` at iteration {iteration}")]
    Diverged { phase: String, iteration: u64 },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(expected: impl core::fmt::Debug, got: impl core::fmt::Debug) -> Error {
    Error::ShapeMismatch {
        expected: alloc::format!("{expected:?}"),
        got: alloc::format!("{got:?}"),
    }
}
