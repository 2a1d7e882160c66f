use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("malformed {what}: {detail}")]
    Parse { what: String, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("image {width}x{height} is smaller than the required minimum {min}")]
    ImageTooSmall { width: u32, height: u32, min: u32 },

    #[error("manifest is not pair-linked: {0}")]
    Unpaired(String),

    #[error("scores contain a single label; both real and fake are required")]
    SingleLabel,

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("program rendered a constant image")]
    ConstantRender,

    #[error("too many failures: {failed} of {total} items failed")]
    TooManyFailures { failed: usize, total: usize },

    #[error("weights: {0}")]
    Weights(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(what: impl Into<String>, detail: impl ToString) -> Self {
        Error::Parse {
            what: what.into(),
            detail: detail.to_string(),
        }
    }

    /// True for errors caused by bad input from the caller (missing files,
    /// invalid flags or configs) rather than by a failure inside a pipeline.
    pub fn is_user_error(&self) -> bool {
        match self {
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            Error::Parse { .. }
            | Error::InvalidArgument(_)
            | Error::NotFound(_)
            | Error::Unpaired(_)
            | Error::SingleLabel
            | Error::Empty(_) => true,
            _ => false,
        }
    }
}

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|e| Error::io(path, e))
    }
}
