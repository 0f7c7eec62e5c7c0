use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot parse {path}: {msg}")]
    Parse { path: PathBuf, msg: String },

    #[error("unsupported format_version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("matrix {name}: blob {blob} is missing")]
    MissingBlob { name: String, blob: PathBuf },

    #[error("matrix {name}: {detail}")]
    ShapeMismatch { name: String, detail: String },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("layer {layer}: Hessian is not positive definite after {attempts} attempts (last damping {damping:e})")]
    NotPositiveDefinite {
        layer: String,
        attempts: usize,
        damping: f64,
    },

    #[error("inverse-Hessian block of structure {candidate} is singular")]
    SingularBlock { candidate: usize },

    #[error("relative error undefined: reference output has zero norm")]
    ZeroReference,

    #[error("token loss undefined: every position is padding")]
    NoTokens,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid latency table: {0}")]
    InvalidTable(String),

    #[error("latency table has no entry for `{key}` with {kept} kept")]
    MissingLatency { key: String, kept: usize },

    #[error("infeasible: {0}")]
    Infeasible(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 input error, 3 infeasible or invalid table,
    /// 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::Parse { .. }
            | Error::VersionMismatch { .. }
            | Error::MissingBlob { .. }
            | Error::ShapeMismatch { .. }
            | Error::InvalidModel(_)
            | Error::Dimension(_)
            | Error::InvalidArgument(_)
            | Error::ZeroReference
            | Error::NoTokens => 2,
            Error::InvalidTable(_) | Error::MissingLatency { .. } | Error::Infeasible(_) => 3,
            Error::NotPositiveDefinite { .. } | Error::SingularBlock { .. } | Error::NonFinite(_) => 4,
        }
    }
}
