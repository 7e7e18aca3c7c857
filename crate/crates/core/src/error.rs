use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at row {row}, column {col}: {detail}")]
    Parse { row: usize, col: usize, detail: String },

    #[error("dataset is empty or shorter than two rows")]
    EmptyDataset,

    #[error("segment of {actual} rows is too short, need at least {needed}")]
    TooShort { needed: usize, actual: usize },

    #[error("feature {0} has zero standard deviation on the training split")]
    DegenerateFeature(usize),

    #[error("division by zero in {0}")]
    DivisionByZero(String),

    #[error("unknown method `{0}`")]
    UnknownMethod(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("non-finite activation at epoch {epoch}, batch {batch}")]
    NonFiniteActivation { epoch: usize, batch: usize },

    #[error("empty instance set")]
    EmptySet,

    #[error("singular regression matrix in ADF test")]
    SingularRegression,

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}
