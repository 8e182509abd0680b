use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("invalid DGP spec: {0}")]
    Spec(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("epsilon {eps} is infeasible; feasible range is [{min}, {max}]")]
    Infeasible { eps: f64, min: f64, max: f64 },

    #[error("labels are all one class; a positive regularization strength is required")]
    RegularizationRequired,

    #[error("no overlap: stratum (r={r}, group={group}) has no observations")]
    NoOverlap { r: u8, group: String },

    #[error("monotonicity violated: {0}")]
    Monotonicity(String),

    #[error("unsupported uncertainty mode: {0}")]
    UnsupportedMode(String),

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
