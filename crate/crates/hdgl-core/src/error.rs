use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },

    #[error("parse error in {path} at row {row}, column {col}: {detail}")]
    Parse {
        path: String,
        row: usize,
        col: usize,
        detail: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("duplicate subject id: {0}")]
    DuplicateSubject(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid window: {0}")]
    InvalidWindow(String),

    #[error("time series too short: {tmax} timepoints yield no windows of length {length} at stride {stride}")]
    TooShortSeries {
        tmax: usize,
        length: usize,
        stride: usize,
    },

    #[error("stratification error: {0}")]
    Stratification(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty graph: {0}")]
    EmptyGraph(String),

    #[error("empty sequence passed to temporal encoder")]
    EmptySequence,

    #[error("degenerate sigma: all pairwise embedding distances are zero")]
    DegenerateSigma,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint incompatible with data: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
