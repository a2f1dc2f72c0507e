use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate {kind} label {label}")]
    DuplicateLabel { kind: &'static str, label: String },

    #[error("empty {0} list")]
    EmptyLabels(&'static str),

    #[error("unknown object label {0}")]
    UnknownLabel(String),

    #[error("invalid bounding box ({x1}, {y1}, {x2}, {y2}): requires x2 > x1 and y2 > y1")]
    InvalidBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("unnormalized distribution")]
    Unnormalized { sum: f64 },

    #[error("empty probability vector")]
    EmptyDistribution,

    #[error("probability vector has negative or non-finite entries")]
    NegativeProbability,

    #[error("{0}")]
    InvalidGraph(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("no training triplets")]
    NoTrainingTriplets,

    #[error("invalid counts record: {0}")]
    InvalidCounts(String),

    #[error("missing embedding for \"{0}\"")]
    MissingEmbedding(String),

    #[error("invalid embedding table: {0}")]
    InvalidEmbedding(String),

    #[error("evidence incompatible with prior support")]
    IncompatibleEvidence,

    #[error("invalid prior model: {0}")]
    InvalidPrior(String),

    #[error("vocabulary hash mismatch: prior has {prior}, vocabulary has {vocabulary}")]
    VocabularyMismatch { prior: String, vocabulary: String },

    #[error("unmatched image ids: {}", .0.join(", "))]
    UnmatchedImages(Vec<String>),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{source} at line {line}")]
    AtLine { line: usize, source: Box<Error> },

    #[error("malformed record: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_line(self, line: usize) -> Self {
        Error::AtLine { line, source: Box::new(self) }
    }

    /// True for failures of the underlying reader or writer rather than of the data.
    pub fn is_io(&self) -> bool {
        match self {
            Error::Io(_) => true,
            Error::AtLine { source, .. } => source.is_io(),
            _ => false,
        }
    }
}
