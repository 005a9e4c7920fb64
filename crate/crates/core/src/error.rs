use thiserror::Error;

pub type Result<T, E = NpaError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NpaError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("empty basket prefix")]
    EmptyPrefix,
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("non-finite loss in batch {batch}: {detail}")]
    NonFiniteLoss { batch: usize, detail: String },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl NpaError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        NpaError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            NpaError::Shape { .. } => "shape",
            NpaError::InvalidArgument(_) => "invalid_argument",
            NpaError::Config(_) => "config",
            NpaError::EmptyPrefix => "empty_prefix",
            NpaError::MissingGrad(_) => "missing_grad",
            NpaError::NonFiniteLoss { .. } => "non_finite_loss",
            NpaError::Parse { .. } => "parse",
            NpaError::Checkpoint(_) => "checkpoint",
            NpaError::Io(_) => "io",
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        NpaError::InvalidArgument(msg.into())
    }
}
