use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point {index} has non-positive depth {depth}")]
    NonPositiveDepth { index: usize, depth: f64 },

    #[error("degenerate 6D rotation input: {0}")]
    DegenerateRotation(&'static str),

    #[error("invalid {what}: {value}")]
    InvalidValue { what: &'static str, value: f64 },

    #[error("invalid {0}")]
    Invalid(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("rejection sampling gave up after {0} retries")]
    RetriesExhausted(usize),

    #[error("predictor produced an invalid update at iteration {iteration}: {source}")]
    InvalidPrediction {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("pair {pair}: model points '{model}' not found")]
    MissingModel { pair: usize, model: String },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(what: &'static str, value: f64) -> Self {
        Error::InvalidValue { what, value }
    }
}
