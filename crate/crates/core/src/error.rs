use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("index {index} out of range for extent {extent}")]
    IndexOutOfRange { index: usize, extent: usize },
    #[error("index {0} appears more than once")]
    DuplicateIndex(usize),
    #[error("image {height}x{width} is not divisible by patch size {patch}")]
    IndivisibleImage {
        height: usize,
        width: usize,
        patch: usize,
    },
    #[error("keep rate {0} is outside (0, 1]")]
    InvalidRate(f64),
    #[error("sampling spec has no keep-rate interval")]
    IntervalInactive,
    #[error("token batch already had patch dropout applied")]
    DoubleDropout,
    #[error("token batch has no CLS token")]
    MissingCls,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("file truncated while reading {0}")]
    TruncatedFile(&'static str),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("loss diverged at epoch {epoch}, step {step}: {loss}")]
    DivergedLoss {
        epoch: usize,
        step: usize,
        loss: f64,
    },
    #[error("csv schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
