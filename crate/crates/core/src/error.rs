use std::path::PathBuf;

use thiserror::Error;

use crate::volume::Dims;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed MetaImage header: {0}")]
    Header(String),

    #[error("payload file not found: {0}")]
    MissingPayload(PathBuf),

    #[error("payload holds {actual} bytes but the header declares {expected}")]
    SizeMismatch { expected: usize, actual: usize },

    #[error("unsupported element type `{0}` (expected MET_UCHAR, MET_SHORT, MET_USHORT or MET_FLOAT)")]
    UnsupportedElementType(String),

    #[error("unsupported MetaImage feature: {0}")]
    Unsupported(String),

    #[error("non-finite value at voxel {index}")]
    NonFinite { index: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimsMismatch { expected: String, found: String },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("intensity range is degenerate (all voxels equal {0})")]
    DegenerateRange(f64),

    #[error("{0} is empty")]
    EmptySet(&'static str),

    #[error("labeled {0} set is empty; confident learning needs both classes")]
    EmptyClass(&'static str),

    #[error("count matrix is all zero; no latent evidence for either class")]
    DegenerateCl,

    #[error("index {value} out of range (limit {limit})")]
    IndexOutOfRange { value: usize, limit: usize },

    #[error("pyramid level {0} out of range (0..=3)")]
    LevelOutOfRange(u32),

    #[error("png: {0}")]
    Png(String),

    #[error("tube control point {point:?} lies outside the volume {dims}")]
    TubeOutOfBounds { point: [f64; 3], dims: Dims },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(expected: impl std::fmt::Display, found: impl std::fmt::Display) -> Self {
        Error::DimsMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// True when the error stems from bad input (including a missing input
    /// file) rather than a failure while processing valid input. The CLI maps this to exit code 2.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::DegenerateCl => false,
            _ => true,
        }
    }
}
