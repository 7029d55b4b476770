use thiserror::Error;

/// Errors surfaced by the simulation library.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("matrix contains non-finite entries: {context}")]
    NonFiniteInput { context: String },

    #[error("rank {k} out of range for a {rows}x{cols} matrix")]
    RankOutOfRange { k: usize, rows: usize, cols: usize },

    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },

    #[error("infeasible class partition: {clients} clients x {per_client} classes < {classes} classes")]
    InfeasiblePartition {
        classes: usize,
        per_client: usize,
        clients: usize,
    },

    #[error("zero head matrix: normalized Gram is undefined")]
    ZeroHead,

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed shard table at line {line}: {reason}")]
    MalformedShardTable { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, CoreError>;
