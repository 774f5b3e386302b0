use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{0} is not symmetric positive definite")]
    NotPositiveDefinite(&'static str),

    #[error("rank deficient: {0}")]
    RankDeficient(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("forward model failed: {0}")]
    Forward(String),

    #[error("gradient of the forward model is unavailable")]
    GradientUnavailable,

    #[error("solver failed: {0}")]
    Solver(String),

    #[error("sampler aborted: {0}")]
    Sampler(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}
