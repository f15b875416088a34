use chrono::NaiveDate;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown market `{0}`")]
    UnknownMarket(String),

    #[error("matrix has no observed entries")]
    EmptyMatrix,

    #[error("SVD did not converge after {iterations} iterations")]
    SvdNonConvergence { iterations: usize },

    #[error("feature length mismatch: expected {expected}, got {got}")]
    FeatureLength { expected: usize, got: usize },

    #[error("insufficient history: need step >= {needed}, got {got}")]
    InsufficientHistory { needed: usize, got: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error(
        "lookahead: training sample for market {market_id} uses data through {latest}, \
         validation date is {cutoff}"
    )]
    Lookahead {
        market_id: String,
        latest: NaiveDate,
        cutoff: NaiveDate,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
