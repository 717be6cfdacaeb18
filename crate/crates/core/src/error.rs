use thiserror::Error;

/// Errors raised anywhere in the simulator and solvers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("csv header: {0}")]
    CsvHeader(String),

    #[error("csv row {row}, column `{column}`: {message}")]
    CsvCell {
        row: usize,
        column: String,
        message: String,
    },

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("learning-rate schedule violates eta*L < 1: {0}")]
    Schedule(String),

    #[error("non-finite model at round {round}, step {step}")]
    Divergence { round: usize, step: usize },

    #[error("degenerate system: {0}")]
    Degenerate(String),

    #[error("target {target} unreachable: {message}")]
    Unreachable { target: f64, message: String },

    #[error("performance function is not concave: {0}")]
    NotConcave(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("config parse: {0}")]
    Toml(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
