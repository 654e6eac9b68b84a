use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = DvfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum DvfError {
    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("provider error: {0}")]
    Provider(#[from] ProviderError),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numerics error: {0}")]
    Numerics(String),

    #[error("unknown label {0}")]
    Label(usize),

    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),
}

/// Failure raised by a detection provider. Network or schema failures are
/// never reported as an empty detection list.
#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("malformed detection file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("detection service returned status {status}")]
    Status { status: u16 },

    #[error("detection service transport failure: {0}")]
    Transport(String),

    #[error("detection payload violates schema: {0}")]
    Schema(String),

    #[error("detection cache unavailable at {path}: {reason}")]
    Cache { path: PathBuf, reason: String },
}

impl DvfError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DvfError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            DvfError::Configuration(_) | DvfError::Shape(_) => 2,
            DvfError::Manifest(_)
            | DvfError::Data(_)
            | DvfError::Geometry(_)
            | DvfError::Label(_)
            | DvfError::Io { .. } => 3,
            DvfError::Provider(_) => 4,
            DvfError::Numerics(_) => 5,
            DvfError::Internal(_) | DvfError::Tensor(_) => 1,
        }
    }
}
