use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library. The CLI maps each variant onto an exit code.
#[derive(Debug, Error)]
pub enum DscError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),

    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },

    #[error("input error: {0}")]
    Input(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },

    #[error("checkpoint checksum mismatch in {0}")]
    Checksum(PathBuf),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint/config mismatch: checkpoint hash {checkpoint}, config hash {config}")]
    ConfigMismatch { checkpoint: String, config: String },

    #[error("corrupt checkpoint {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("i/o error at step {step} on {path}: {source}")]
    Io {
        path: PathBuf,
        step: u64,
        #[source]
        source: std::io::Error,
    },

    #[error("image encoding error: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, DscError>;

impl DscError {
    pub(crate) fn io(path: impl Into<PathBuf>, step: u64, source: std::io::Error) -> Self {
        DscError::Io {
            path: path.into(),
            step,
            source,
        }
    }

    /// Mapping onto the CLI exit codes: 1 usage/config, 2 runtime/numeric, 3 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            DscError::Config(_)
            | DscError::UnknownKey(_)
            | DscError::InvalidValue { .. }
            | DscError::ConfigMismatch { .. } => 1,
            DscError::Io { .. } | DscError::Image(_) => 3,
            _ => 2,
        }
    }
}
