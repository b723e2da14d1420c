use thiserror::Error;

pub type Result<T, E = SnasError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum SnasError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("no graph node with id {0}")]
    UnknownNode(usize),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint integrity check failed: {0}")]
    Integrity(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at {stage} iteration {iteration}: {detail}")]
    Diverged {
        stage: String,
        iteration: usize,
        detail: String,
    },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<SnasError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SnasError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        SnasError::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        SnasError::InvalidArgument(msg.into())
    }
}
