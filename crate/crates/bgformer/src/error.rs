use std::path::PathBuf;

/// Unified error type for the whole pipeline.
#[derive(Debug, thiserror::Error)]
pub enum BgError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value in {part}")]
    NonFinite { part: String },

    #[error("parse error at {path}:{line}: {detail}")]
    ParseError {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("negative count at row {row}, column {col}: {value}")]
    NegativeCount { row: usize, col: usize, value: f64 },

    #[error("matrix is empty after {stage} ({rows} rows x {cols} cols)")]
    EmptyMatrix {
        stage: &'static str,
        rows: usize,
        cols: usize,
    },

    #[error("requested {requested} genes but only {available} available")]
    InsufficientGenes { requested: usize, available: usize },

    #[error("cell {row} has zero total counts")]
    ZeroLibrary { row: usize },

    #[error("zero vector in {op} at row {row}")]
    ZeroVector { op: &'static str, row: usize },

    #[error("cluster {cluster} has zero total soft mass")]
    DegenerateCluster { cluster: usize },

    #[error("need at least {needed} cells for {k} clusters, got {got}")]
    InsufficientCells { needed: usize, k: usize, got: usize },

    #[error("label {label} out of range for {count} classes")]
    LabelOutOfRange { label: usize, count: usize },

    #[error("construction failed: {0}")]
    ConstructionError(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl BgError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BgError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: I/O and parse failures map to 2,
    /// infeasible requests (too few genes/cells) map to 3, everything else 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            BgError::Io { .. } | BgError::ParseError { .. } => 2,
            BgError::InsufficientGenes { .. } | BgError::InsufficientCells { .. } => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, BgError>;
