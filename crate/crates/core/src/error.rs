use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image dimensions do not agree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An input value is non-finite or outside its domain.
    #[error("invalid input: {0}")]
    Input(String),

    /// A precondition on an argument is violated.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A training step produced a non-finite loss or gradient.
    #[error("training failed at iteration {iteration}: {detail}")]
    Training { iteration: usize, detail: String },

    /// A gradient walk hit a non-finite gradient.
    #[error("gradient walk failed: {0}")]
    Walk(String),

    /// A numerical routine could not produce a valid result.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A binary file is malformed.
    #[error("format error at byte offset {offset}: {detail}")]
    Format { offset: usize, detail: String },

    /// A CSV cell could not be parsed; row and column are 1-based.
    #[error("CSV error at row {row}, column {column}: {detail}")]
    Csv {
        row: usize,
        column: usize,
        detail: String,
    },

    /// A `key = value` configuration line is invalid; line is 1-based.
    #[error("config error at line {line}: {detail}")]
    Config { line: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
