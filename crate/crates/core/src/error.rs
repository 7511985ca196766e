use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("invalid sparse structure: {0}")]
    InvalidCsr(String),
    #[error("non-finite value in {what} at row {row}, col {col}")]
    NonFinite {
        what: &'static str,
        row: usize,
        col: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("user {0} has an empty history")]
    EmptyHistory(usize),
    #[error("unknown item id {item} (catalog has {n_items} items)")]
    UnknownItem { item: usize, n_items: usize },
    #[error("no ranking provided for user {0}")]
    MissingRanking(usize),
    #[error("feature row count {found} does not match expected item count {expected}")]
    ItemCountMismatch { expected: usize, found: usize },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
