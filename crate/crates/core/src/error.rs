use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("softmax row {row} has no valid position")]
    DegenerateRow { row: usize },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("empty input sequence")]
    EmptySequence,

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("scene schema error: {0}")]
    Schema(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },

    #[error("no scene files in {0}")]
    EmptyDataset(std::path::PathBuf),

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint version error: {0}")]
    Version(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: traj {traj}, score {score}")]
    NonFiniteLoss { epoch: usize, batch: usize, traj: f64, score: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
