use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range 0..{bound}")]
    Index { index: i64, bound: usize },

    #[error("timestep ordering error: t_prev={t_prev} must be < t={t}")]
    Ordering { t: usize, t_prev: i64 },

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("training diverged at iteration {iteration} (loss={loss})")]
    TrainingFailure { iteration: usize, loss: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("evaluation failed at weights {weights:?}: {source}")]
    Evaluation {
        weights: Vec<f64>,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Short machine-readable category, stable across releases.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Index { .. } => "index",
            Error::Ordering { .. } => "ordering",
            Error::Alignment(_) => "alignment",
            Error::TrainingFailure { .. } => "training",
            Error::Degenerate(_) => "degenerate",
            Error::Evaluation { .. } => "evaluation",
        }
    }
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}
