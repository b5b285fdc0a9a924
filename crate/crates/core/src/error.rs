use thiserror::Error;

/// Errors produced by the solver, the oracles and the diagnostics.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// The model did not decrease along the computed step.
    #[error("degenerate subproblem: model decrease {0:e} is not positive")]
    DegenerateSubproblem(f64),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("singular matrix: {0}")]
    Singular(&'static str),

    #[error("trace carries no ground-truth values")]
    MissingGroundTruth,

    #[error("empty batch")]
    EmptyBatch,

    #[error("ensemble of size {size} is too small, need at least {min}")]
    EnsembleTooSmall { size: usize, min: usize },

    #[error("at least {min} samples are required, got {got}")]
    TooFewSamples { got: usize, min: usize },

    #[error("iteration {iter}: {source}")]
    AtIteration {
        iter: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at(self, iter: usize) -> Self {
        Error::AtIteration {
            iter,
            source: Box::new(self),
        }
    }

    /// Strips any iteration context.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtIteration { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite_vec(v: &nalgebra::DVector<f64>, what: &'static str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

pub(crate) fn ensure_finite_mat(m: &nalgebra::DMatrix<f64>, what: &'static str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}
