use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The variants map onto the CLI exit-code table: `Config`/`Usage` are usage
/// errors, `Data`/`Format`/`Corruption`/`Io`/`Json` are data errors, and
/// `Numeric`/`Verification` are numeric failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("range error in {op}: {detail}")]
    Range { op: &'static str, detail: String },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("input too long: {len} tokens exceeds max_len {max_len}")]
    Length { len: usize, max_len: usize },
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt checkpoint: {0}")]
    Corruption(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn range(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Range {
            op,
            detail: detail.into(),
        }
    }
}
