use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("geometry: {0}")]
    Geometry(String),

    #[error("invalid grid pair: both patches sit in cell {0}")]
    InvalidPair(usize),

    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },

    #[error("scale mismatch: {0}")]
    ScaleMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite loss at epoch {epoch} step {step}: {details}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        details: String,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("missing ground-truth mask {}", .0.display())]
    MissingMask(PathBuf),

    #[error("file format: {0}")]
    Format(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short category tag used by the command-line front end.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Geometry(_) => "geometry",
            Error::InvalidPair(_) | Error::InvalidLabel { .. } | Error::InvalidInput(_) => "input",
            Error::ScaleMismatch(_) => "scale",
            Error::Config(_) => "config",
            Error::NonFiniteLoss { .. } => "training",
            Error::Dataset(_) | Error::MissingMask(_) => "dataset",
            Error::Format(_) | Error::Json(_) => "format",
            Error::Io { .. } | Error::Image { .. } => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
