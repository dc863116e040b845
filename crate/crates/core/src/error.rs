use thiserror::Error;

pub type Result<T> = std::result::Result<T, CoreError>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("degenerate polyline")]
    DegeneratePolyline,

    #[error("empty point set")]
    EmptyPointSet,

    #[error("infeasible scene config: {0}")]
    InfeasibleSceneConfig(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unsupported schema version: {0}")]
    UnsupportedSchema(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("config hash mismatch: checkpoint was trained with a different config")]
    ConfigHashMismatch,

    #[error("non-finite loss at step {step} (batch seed {batch_seed}): {detail}")]
    NonFiniteLoss {
        step: usize,
        batch_seed: u64,
        detail: String,
    },

    #[error("missing run: {0}")]
    MissingRun(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
