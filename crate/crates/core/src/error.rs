use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-positive output dimension: {0}")]
    EmptyOutput(String),

    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("invalid bottleneck: {0}")]
    InvalidBottleneck(String),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("invalid budget: {0}")]
    InvalidBudget(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("element count overflow in {0}")]
    Overflow(String),

    #[error(
        "arena overflow: requested {requested} bytes at cursor {cursor} (capacity {capacity})"
    )]
    ArenaOverflow {
        requested: u64,
        cursor: u64,
        capacity: u64,
    },

    #[error("arena misuse: {0}")]
    ArenaMisuse(String),

    #[error("budget exceeded in {op}: {source}")]
    BudgetExceeded {
        op: String,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}, column {column}: {msg}")]
    Parse {
        line: usize,
        column: usize,
        msg: String,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("weights length mismatch: expected {expected} bytes, got {actual}")]
    WeightsLength { expected: usize, actual: usize },

    #[error("image error: {0}")]
    Image(String),
}
