use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("minutia at ({x:.3}, {y:.3}) lies outside the grid mask")]
    OffMask { x: f64, y: f64 },

    #[error("invalid mask: {0}")]
    InvalidMask(String),

    #[error("shape mismatch at node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("template {template_id}: {detail}")]
    Template { template_id: String, detail: String },

    #[error("too few nodes: {have} valid, need at least {need}")]
    TooFewNodes { have: usize, need: usize },

    #[error("configuration: {0}")]
    Config(String),

    #[error("missing parameter `{0}`")]
    MissingParam(String),

    #[error("no negative available for anchor {0}")]
    NoNegative(usize),

    #[error("unknown pose class `{0}`")]
    UnknownPoseClass(String),

    #[error("training diverged at epoch {epoch}: {detail}")]
    Diverged { epoch: usize, detail: String },

    #[error("parse error at {path}:{line}: {detail}")]
    Parse {
        path: String,
        line: usize,
        detail: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown matcher `{0}`")]
    UnknownMatcher(String),

    #[error("protocol: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
