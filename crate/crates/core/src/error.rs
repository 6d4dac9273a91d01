use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("pixel ({row}, {col}) of selection entry {index} is outside the {width}x{height} image")]
    PixelOutOfBounds {
        index: usize,
        row: usize,
        col: usize,
        width: usize,
        height: usize,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("negative density {value} at sample {sample}")]
    NegativeDensity { sample: usize, value: f64 },

    #[error("no forward record for this batch: {0}")]
    MissingForward(String),

    #[error("numerical failure at iteration {iteration}: {detail}")]
    Numerical { iteration: usize, detail: String },

    #[error("missing input {path}: {detail}")]
    MissingInput { path: PathBuf, detail: String },

    #[error("corrupt artifact {path}: {detail}")]
    Corrupt { path: PathBuf, detail: String },

    #[error("schema violation at `{path}`: {detail}")]
    Schema { path: String, detail: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("missing frames: {0:?}")]
    MissingFrames(Vec<usize>),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingInput { .. } | Error::MissingFrames(_) => 2,
            Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
            Error::Corrupt { .. } => 3,
            Error::Numerical { .. } | Error::NonFinite(_) | Error::NegativeDensity { .. } => 4,
            _ => 1,
        }
    }
}
