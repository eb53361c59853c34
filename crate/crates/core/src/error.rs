use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("no tasks registered with the router")]
    NoTasks,

    #[error("token {token} is outside the vocabulary of size {vocab}")]
    OutOfVocab { token: usize, vocab: usize },

    #[error("layer {layer} carries no adapter (adapted layers are {first}..={last})")]
    LayerNotAdapted {
        layer: usize,
        first: usize,
        last: usize,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("accuracy matrix incomplete: {0}")]
    IncompleteMatrix(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
