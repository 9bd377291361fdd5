use thiserror::Error;

/// Errors raised anywhere in the lab.
///
/// The variants are coarse on purpose: the CLI maps them onto exit codes
/// (config → 2, numerical → 3), so every failure has to land in exactly
/// one bucket.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("degenerate input: norm {norm:e} below epsilon {epsilon:e}")]
    DegenerateInput { norm: f64, epsilon: f64 },

    #[error("degenerate box: {0}")]
    DegenerateBox(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("infeasible specification: {0}")]
    Infeasible(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Infeasible(_) | Error::Json(_)
        )
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::DegenerateInput { .. })
    }
}
