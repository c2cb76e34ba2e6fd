use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("grad: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("grad: op `{op}` has no differentiable backward rule; cannot retain its graph")]
    NoDoubleBackward { op: String },

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("non-physical Stokes vector at pixel {index:?}: s1^2 + s2^2 > s0^2")]
    NonPhysicalStokes { index: Vec<usize> },

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad tensor file: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, a: &[usize], b: &[usize]) -> Self {
        Error::Shape { op, detail: format!("{a:?} vs {b:?}") }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Invalid(_))
    }
}
