use thiserror::Error;

/// Errors raised by the library. File-format problems are kept distinct from
/// numeric/structural precondition failures so callers can map them to
/// different exit codes.
#[derive(Debug, Error)]
pub enum GbError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed header of a descriptor file.
    #[error("bad header: {0}")]
    BadHeader(String),

    /// CSV row with the wrong number of fields.
    #[error("row arity mismatch at line {line}: expected {expected} fields, found {found}")]
    RowArity {
        line: usize,
        expected: usize,
        found: usize,
    },

    /// Binary payload shorter or longer than the header promises.
    #[error("payload size mismatch: expected {expected} bytes, found {found}")]
    PayloadSize { expected: usize, found: usize },

    /// A value that must be finite is NaN or infinite.
    #[error("non-finite {0}")]
    NonFinite(String),

    /// Two descriptors share a sample id.
    #[error("duplicate sample id: {0}")]
    DuplicateId(String),

    /// A malformed field value in a text input.
    #[error("bad value at line {line}: {msg}")]
    BadValue { line: usize, msg: String },

    /// A numeric or structural precondition was violated.
    #[error("{0}")]
    InvalidInput(String),
}

impl GbError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        GbError::InvalidInput(msg.into())
    }

    /// True for errors produced while reading/parsing an input file.
    pub fn is_file_error(&self) -> bool {
        !matches!(self, GbError::InvalidInput(_))
    }
}

pub type Result<T> = std::result::Result<T, GbError>;
