use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("matrix is not positive semi-definite (factorization failed after jitter {jitter:e})")]
    NotPsd { jitter: f64 },

    #[error("matrix is not symmetric (max relative asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error("posterior collapse: no member explains the data")]
    PosteriorCollapse,

    #[error("no convergence after {steps} steps (last change {last_change:e})")]
    NonConvergence {
        steps: usize,
        last_change: f64,
        last_iterate: Vec<f64>,
    },

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Divergence { epoch: usize },

    #[error("unknown dataset: {0}")]
    UnknownDataset(String),

    #[error("insufficient pool: need {need} samples, have {have}")]
    InsufficientPool { need: usize, have: usize },

    #[error("bad magic in model container")]
    BadMagic,

    #[error("unsupported container version {found} (expected {expected})")]
    VersionSkew { found: u32, expected: u32 },

    #[error("truncated container: {0}")]
    Truncated(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dropout is disabled for this backbone")]
    DropoutDisabled,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
