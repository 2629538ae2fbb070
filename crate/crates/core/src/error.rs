use std::ops::Range;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("precision of {0} bits outside supported range 1..=16")]
    InvalidPrecision(u32),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("value {value} outside range [{lo}, {hi}]")]
    OutOfRange { value: i64, lo: i64, hi: i64 },

    #[error("invalid crossbar geometry: {0}")]
    Geometry(String),

    #[error("expected {expected} partial results, got {got}")]
    Arity { expected: usize, got: usize },

    #[error("mask selects {got} positions, expected {expected}")]
    MaskPopcount { expected: usize, got: usize },

    #[error("segment rows {rows:?} straddle a block boundary (block height {block_rows})")]
    BlockMisaligned {
        rows: Range<usize>,
        block_rows: usize,
    },

    #[error("key store does not match mapped model: {0}")]
    KeyMismatch(String),

    #[error("unknown protection method `{0}`")]
    UnknownMethod(String),

    #[error("method {method} is not defined for mapping scheme {scheme}")]
    NotApplicable { method: String, scheme: u8 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn geometry(msg: impl Into<String>) -> Self {
        Error::Geometry(msg.into())
    }

    /// True for failures reading or writing the filesystem, as opposed to
    /// validation failures on well-formed input.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}
