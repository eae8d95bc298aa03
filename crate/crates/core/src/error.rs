use std::path::PathBuf;

/// Errors produced by the retrieval pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,
    #[error("window must be odd (got {0})")]
    EvenWindow(usize),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("no foreground tokens{}", doc_suffix(.0))]
    NoForegroundTokens(Option<String>),
    #[error("insufficient distinct features: need {needed}, found {found}")]
    InsufficientDistinctFeatures { needed: usize, found: usize },
    #[error("requested dimensionality exceeds data rank (requested {requested}, rank {rank})")]
    RankDeficient { requested: usize, rank: usize },
    #[error("undefined cosine distance")]
    UndefinedCosineDistance,
    #[error("no query has a relevant document")]
    NoRelevantDocuments,
    #[error("malformed container {path}: {reason}")]
    Container { path: PathBuf, reason: String },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn doc_suffix(doc: &Option<String>) -> String {
    match doc {
        Some(id) => format!(" in document `{id}`"),
        None => String::new(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
