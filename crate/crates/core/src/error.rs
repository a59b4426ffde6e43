use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate vector: norm {norm:e} is below 1e-12")]
    DegenerateVector { norm: f64 },

    #[error("invalid temperature {0}: must be > 0")]
    InvalidTemperature(f64),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("forward trace does not belong to this encoder state: {0}")]
    StaleTrace(&'static str),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("no valid pairs or triplets: {0}")]
    EmptyMining(&'static str),

    #[error("class {0} has no proxy")]
    UnknownClass(usize),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("batch spec cannot be satisfied: {0}")]
    Unsatisfiable(String),

    #[error("inter-class distance undefined: need at least two classes")]
    UndefinedInter,

    #[error("cannot corrupt labels of a dataset with fewer than two classes")]
    CannotCorrupt,

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("{path}:{line}: parse error: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: schema error: {msg}")]
    Schema {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
