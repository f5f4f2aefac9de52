use thiserror::Error;

/// Every failure the library can report.
///
/// The variants are grouped by what the caller should do about them:
/// [`Error::is_validation`] is true for problems with the inputs themselves
/// (bad shapes, bad parameters, malformed files), false for failures that
/// happen while a well-formed job runs.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("selection error: {0}")]
    Selection(String),
    #[error("loss error: {0}")]
    Loss(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("score error: {0}")]
    Score(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Param(_) => "param",
            Error::Validation(_) => "validation",
            Error::Format(_) => "format",
            Error::Usage(_) => "usage",
            Error::Graph(_) => "graph",
            Error::Selection(_) => "selection",
            Error::Loss(_) => "loss",
            Error::Generation(_) => "generation",
            Error::Training(_) => "training",
            Error::Data(_) => "data",
            Error::Score(_) => "score",
            Error::Io(_) => "io",
            Error::Image(_) => "image",
            Error::Json(_) => "json",
        }
    }

    /// True when the error is caused by the inputs rather than by the run.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Shape(_)
            | Error::Param(_)
            | Error::Validation(_)
            | Error::Format(_)
            | Error::Usage(_)
            | Error::Json(_) => true,
            Error::Image(image::ImageError::IoError(e)) | Error::Io(e) => {
                e.kind() == std::io::ErrorKind::NotFound
            }
            Error::Image(image::ImageError::Decoding(_)) => true,
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
