use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate vector (norm <= 1e-12): {0}")]
    DegenerateVector(String),

    #[error("encoder does not support input gradients")]
    NotDifferentiable,

    #[error("unknown image id `{0}`")]
    UnknownId(String),

    #[error("embedding file format error: {0}")]
    Format(String),

    #[error("support set is empty")]
    EmptySupport,

    #[error("class imbalance: {0}")]
    ClassImbalance(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing adversarial record for `{0}`")]
    MissingAdversarial(String),

    #[error("category `{category}`, shot {shot}, seed {seed}: {source}")]
    Cell {
        category: String,
        shot: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image decode error in {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::DegenerateVector(_) => "degenerate_vector",
            Error::NotDifferentiable => "not_differentiable",
            Error::UnknownId(_) => "unknown_id",
            Error::Format(_) => "format",
            Error::EmptySupport => "empty_support",
            Error::ClassImbalance(_) => "class_imbalance",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Dataset(_) => "dataset",
            Error::Config(_) => "config",
            Error::MissingAdversarial(_) => "missing_adversarial",
            Error::Cell { source, .. } => source.kind(),
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}
