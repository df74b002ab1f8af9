use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: malformed NPY header: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("{path}: unsupported dtype {descr:?} (expected '<f4' or '<i8')")]
    UnsupportedDtype { path: PathBuf, descr: String },

    #[error("{path}: non-finite value at flat index {index}")]
    NonFiniteValue { path: PathBuf, index: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema violation: {0}")]
    SchemaViolation(String),

    #[error("backbone {0:?} listed more than once")]
    DuplicateBackboneName(String),

    #[error("unknown backbone {0:?}")]
    UnknownBackboneName(String),

    #[error("unknown split {0:?}")]
    UnknownSplit(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty matrix")]
    EmptyMatrix,

    #[error("empty list")]
    EmptyList,

    #[error("no example is predicted correctly by any backbone")]
    EmptyUnion,

    #[error("too many backbones for an overlap table: {0} (max 16)")]
    TooManyBackbones(usize),

    #[error("baseline accuracy is zero")]
    ZeroBaseline,

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),

    #[error("not a probability distribution (sum = {0})")]
    NotADistribution(f64),

    #[error("top-3 voting needs at least 3 classes, got {0}")]
    TooFewClasses(usize),

    #[error("loss became non-finite")]
    NonFiniteLoss,

    #[error("backbone {0:?} has no features")]
    MissingFeatures(String),

    #[error("split {0:?} has no examples")]
    EmptySplit(String),

    #[error("model does not match the data: {0}")]
    DimMismatchOnLoad(String),

    #[error("cascade combiner is missing state: {0}")]
    MissingCombinerState(String),

    #[error("no examples to sample from")]
    EmptyClassSet,

    #[error("infeasible accuracy {requested} for backbone {backbone}: feasible interval is [{low}, {high}]")]
    InfeasibleRates {
        backbone: usize,
        requested: f64,
        low: f64,
        high: f64,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
