use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rigid transform: {0}")]
    InvalidTransform(String),

    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("invalid camera rig: {0}")]
    InvalidRig(String),

    #[error("logarithm is ill-conditioned near a rotation angle of pi (angle = {angle})")]
    IllConditionedLog { angle: f64 },

    #[error("grid dimensions do not match: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty evaluation mask")]
    EmptyMask,

    #[error("median is zero")]
    ZeroMedian,

    #[error("optimization diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

    #[error("malformed {format} data: {detail}")]
    Format {
        format: &'static str,
        detail: String,
    },

    #[error("{path}: {detail}")]
    Parse { path: PathBuf, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
