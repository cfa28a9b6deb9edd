use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {msg}")]
    InvalidShape { shape: Vec<usize>, msg: String },

    /// A vector whose Euclidean norm fell below the normalization guard.
    #[error("degenerate vector at slice {index}: norm {norm:e} below {eps:e}")]
    DegenerateVector { index: usize, norm: f64, eps: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    /// Training loss became NaN or infinite.
    #[error("divergence at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("geometry mismatch: {0}")]
    Geometry(String),

    #[error("infeasible mask configuration: {0}")]
    InfeasibleMask(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("index {index} out of range for {what} of size {size}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),

    #[error("corrupt file {path}: {msg}")]
    Format { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
