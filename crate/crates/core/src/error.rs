use thiserror::Error;

/// Errors raised by every module of the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("zero-norm vector cannot be normalized")]
    ZeroVector,
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("not a probability distribution: entries sum to {0}")]
    NotADistribution(f64),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("function value is not finite")]
    NonFiniteFunctionValue,
    #[error("finite-difference step {0} outside [1e-6, 1e-3]")]
    InvalidStep(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension {dim} is smaller than category count {categories}")]
    DimensionTooSmall { dim: usize, categories: usize },
    #[error("a simplex ETF needs at least 2 categories, got {0}")]
    DegenerateCategoryCount(usize),
    #[error("category {0} has fewer than 2 samples")]
    InsufficientSamples(usize),
    #[error("category count mismatch: {0} text means vs {1} video means")]
    CategoryCountMismatch(usize, usize),

    #[error("k_e = {k} exceeds expert count {experts}")]
    KTooLarge { k: usize, experts: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("batch size mismatch: {0} texts vs {1} videos")]
    BatchSizeMismatch(usize, usize),

    #[error("unknown category {0}")]
    UnknownCategory(usize),
    #[error("task {0} > 1 requires the previous model snapshot")]
    MissingSnapshot(usize),
    #[error("data leak: pair of category {category} accessed while training task {task}")]
    DataLeak { task: usize, category: usize },
    #[error("frozen base weights changed while training task {0}")]
    FrozenWeightsChanged(usize),

    #[error("ground-truth video {0} not in gallery")]
    TruthNotInGallery(usize),
    #[error("empty rank list")]
    EmptyRankList,
    #[error("backward forgetting needs at least 2 tasks, got {0}")]
    InsufficientTasks(usize),

    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
