use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {location}: {message}")]
    Parse { location: String, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("too few identities: need at least {needed}, found {found}")]
    TooFewIdentities { needed: usize, found: usize },

    #[error("cannot decode video {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("no faces detected in any sampled frame of video {0}")]
    NoFaces(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("identity leak: identities present on both sides of a split: {0:?}")]
    IdentityLeak(Vec<String>),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("asset missing: {0}")]
    AssetMissing(String),

    #[error("missing embeddings for {n} video(s): {0:?}", n = .0.len())]
    MissingEmbeddings(Vec<String>),

    #[error("only one class present; metric needs both positives and negatives")]
    SingleClass,

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("missing upstream artifact {stage} (expected fingerprint {fingerprint})")]
    MissingUpstream { stage: String, fingerprint: String },

    #[error("training diverged: {0}")]
    TrainingDiverged(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable machine-readable tag, used in CLI error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "ParseError",
            Error::Integrity(_) => "IntegrityError",
            Error::TooFewIdentities { .. } => "TooFewIdentities",
            Error::Decode { .. } => "DecodeError",
            Error::NoFaces(_) => "NoFacesError",
            Error::IncompatibleCheckpoint(_) => "IncompatibleCheckpoint",
            Error::IdentityLeak(_) => "IdentityLeakError",
            Error::EmptyDataset(_) => "EmptyDataset",
            Error::EmptyInput(_) => "EmptyInput",
            Error::AssetMissing(_) => "AssetMissing",
            Error::MissingEmbeddings(_) => "MissingEmbeddings",
            Error::SingleClass => "SingleClassError",
            Error::DegenerateInput(_) => "DegenerateInput",
            Error::MissingUpstream { .. } => "MissingUpstream",
            Error::TrainingDiverged(_) => "TrainingDiverged",
            Error::Config(_) => "ConfigError",
            Error::Precondition(_) => "PreconditionViolation",
            Error::Tensor(_) => "TensorError",
            Error::Image(_) => "ImageError",
            Error::Json(_) => "JsonError",
            Error::Io { .. } => "IoError",
        }
    }
}
