use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller violated a documented precondition (shape, range, emptiness).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error in bag `{bag_id}`: {reason}")]
    Parse { bag_id: String, reason: String },

    #[error("malformed {file}: {reason}")]
    Format { file: String, reason: String },

    #[error("non-finite loss at epoch {epoch}, bag `{bag_id}`")]
    NonFinite { epoch: usize, bag_id: String },

    #[error("curvature undefined: every item has zero singleton utility")]
    CurvatureUndefined,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used by the CLI's one-line error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Parse { .. } => "parse",
            Error::Format { .. } => "format",
            Error::NonFinite { .. } => "non_finite",
            Error::CurvatureUndefined => "curvature_undefined",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
