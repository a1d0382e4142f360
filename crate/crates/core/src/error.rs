use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::tensor_file::FormatError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid dimensions: {0}")]
    Dims(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("unknown tokens: {}", .0.join(", "))]
    UnknownTokens(Vec<String>),
    #[error("prompt template: {0}")]
    Template(String),
    #[error("learner kind mismatch: expected {expected}, got {found}")]
    KindMismatch { expected: String, found: String },
    #[error("missing parameter group `{0}`")]
    MissingParams(&'static str),
    #[error("non-finite posterior parameters")]
    NonFinitePosterior,
    #[error("at least one Monte-Carlo sample is required")]
    NoSamples,
    #[error("prompt collection needs at least 2 prompts, got {0}")]
    CollectionTooSmall(usize),
    #[error("empty class list")]
    NoClasses,
    #[error("empty evaluation split")]
    EmptySplit,
    #[error("invalid dataset spec: {0}")]
    DatasetSpec(String),
    #[error("not enough examples: {0}")]
    InsufficientExamples(String),
    #[error("harmonic mean undefined when both accuracies are zero")]
    HarmonicUndefined,
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown preset `{name}`; available: {}", .available.join(", "))]
    UnknownPreset {
        name: String,
        available: Vec<&'static str>,
    },
    #[error("dataset file line {line}: {message}")]
    DatasetFile { line: usize, message: String },
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
