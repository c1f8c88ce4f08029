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

    #[error("unrecognized format")]
    UnrecognizedFormat,

    #[error("corrupt container: {0}")]
    CorruptContainer(String),

    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),

    #[error("duplicate record name `{0}`")]
    DuplicateName(String),

    #[error("invalid record `{name}`: {reason}")]
    InvalidRecord { name: String, reason: String },

    #[error("missing record `{0}`")]
    MissingRecord(String),

    #[error("degenerate vector (zero norm)")]
    DegenerateVector,

    #[error("degenerate patch vector at ({row}, {col})")]
    DegeneratePatch { row: usize, col: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("downsampling unsupported: {from_h}x{from_w} -> {to_h}x{to_w}")]
    DownsamplingUnsupported {
        from_h: usize,
        from_w: usize,
        to_h: usize,
        to_w: usize,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("empty evaluation")]
    EmptyEvaluation,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("inconsistent dataset: {0}")]
    InconsistentDataset(String),

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
