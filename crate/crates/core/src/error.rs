use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid lattice: {0}")]
    InvalidLattice(String),

    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("cell {cell} outside the lattice [-{max}, {max}]")]
    CellOutOfRange { cell: i64, max: i64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// |v_a - v_b| is too small for the winding / polar phase to be defined.
    #[error("branch point: |v_a - v_b| = {gap:e} is at the gap-closing point")]
    BranchPoint { gap: f64 },

    #[error("singular: {0}")]
    Singular(String),

    #[error("not converged: {0}")]
    NotConverged(String),

    #[error("rank-deficient fit: {0}")]
    RankDeficient(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization: {0}")]
    Serialization(String),
}

impl Error {
    pub(crate) fn param(field: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field,
            reason: reason.into(),
        }
    }
}
