use std::path::PathBuf;
use thiserror::Error;

/// Library-wide error type. The CLI maps these onto exit codes: I/O and
/// corrupt-store problems are distinct from config validation and from
/// resource-infeasible requests, so keep those groups separable here.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("corrupt plane {file}: expected {expected} bytes, found {found}")]
    CorruptPlane {
        file: String,
        expected: u64,
        found: u64,
    },

    #[error("refusing to overwrite existing slide at {0}")]
    AlreadyExists(PathBuf),

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("no level at {0} mpp")]
    MissingLevel(f64),

    #[error("missing mask \"{0}\"")]
    MissingMask(String),

    #[error("missing channel role {0}")]
    MissingChannel(String),

    #[error("augmentation parse error: {msg}, line {line}")]
    AugmentParse { line: usize, msg: String },

    #[error("parameter file does not match predictor config (hash mismatch)")]
    ParamsHashMismatch,

    #[error("pool capacity {capacity} is smaller than n_min {n_min}")]
    PoolInfeasible { capacity: usize, n_min: usize },

    #[error("empty split: {0}")]
    EmptySplit(String),

    /// Operation precondition failures that are neither I/O nor config-file
    /// problems (empty batch, halo too small, empty error map, ...).
    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
