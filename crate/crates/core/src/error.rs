use thiserror::Error;

/// Errors raised by the codeprint pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },

    #[error("duplicate function name `{0}`")]
    DuplicateFunction(String),

    #[error("line {line}: address {address:#x} does not increase within function `{function}`")]
    NonMonotoneAddress {
        line: usize,
        function: String,
        address: u64,
    },

    #[error("function `{0}` overlaps the address range of the preceding function")]
    OverlappingFunctions(String),

    #[error("listing contains no functions")]
    EmptyListing,

    #[error("catalog line {line}: {message}")]
    Catalog { line: usize, message: String },

    #[error("record {record}: {message}")]
    Schema { record: usize, message: String },

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("register swap {0}<->{1} rejected: {2}")]
    RegisterSwapRejected(String, String, String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
