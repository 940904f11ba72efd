use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid linear predictor: {0}")]
    InvalidPredictor(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate covariate column {column}: zero sample variance")]
    DegenerateCovariate { column: usize },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("model not identified: {reason} (condition number {condition:.3e})")]
    NonIdentified { reason: String, condition: f64 },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("no local data: all kernel weights vanish at the query point")]
    NoLocalData,

    #[error("separation: local likelihood is one-sided ({0})")]
    Separation(String),

    #[error("oracle failure: {0}")]
    OracleFailure(String),

    #[error("empty dataset: no usable rows")]
    EmptyDataset,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("parse error: {0}")]
    Parse(String),
}
