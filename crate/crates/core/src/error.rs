use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no decodable slice images in {0}")]
    EmptyDirectory(PathBuf),
    #[error("slice {name} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    MixedDimensions {
        name: String,
        want_w: usize,
        want_h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("cannot decode {path}: {reason}")]
    UndecodableImage { path: PathBuf, reason: String },
    #[error("window width must be positive, got {0}")]
    NonPositiveWindow(f64),
    #[error("line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("no pixel exceeds the foreground threshold {0}")]
    EmptyForeground(f64),
    #[error("image width {0} is too narrow to split")]
    TooNarrow(usize),
    #[error("target size must be at least 1x1, got {0}x{1}")]
    ZeroTarget(usize, usize),
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("input is empty")]
    EmptyInput,
    #[error("volume length must be at least 1")]
    ZeroLength,

    #[error("no prediction for {0}")]
    MissingPrediction(String),
    #[error("patient {patient}: slice predictions missing for indices {missing:?}")]
    IncompleteSliceSet { patient: String, missing: Vec<usize> },

    #[error("no predictions to aggregate")]
    EmptyPredictions,

    #[error("{what} = {value} outside [{lo}, {hi}]")]
    OutOfRange {
        what: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("not a probability distribution: {0}")]
    InvalidDistribution(String),
    #[error("training labels contain a single class")]
    DegenerateLabels,
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("patient {0} is present in only one of prediction and truth")]
    KeyMismatch(String),
    #[error("nothing to evaluate")]
    EmptyEvaluation,
    #[error("class {class} has {have} samples, need at least {need}")]
    TooFewSamples {
        class: &'static str,
        have: usize,
        need: usize,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
