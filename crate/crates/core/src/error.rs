use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("velocity field evaluated at singular time t = {t}")]
    SingularTime { t: f64 },

    #[error("interpolant covariance is singular at t = {t} (condition number {condition:.3e})")]
    SingularCovariance { t: f64, condition: f64 },

    #[error("point {x:?} is outside the support of the field at t = {t}")]
    OutOfSupport { t: f64, x: Vec<f64> },

    #[error("field evaluation failed: {0}")]
    Evaluation(String),

    #[error("evaluation failed at row {index}: {source}")]
    AtPoint {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("integration failed at t = {t}, state {state:?}: {source}")]
    Integration {
        t: f64,
        state: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("integration diverged at t = {t}")]
    Divergence { t: f64 },

    #[error("coupling is not rectifiable: trajectories collapse at t* = {t_star:.4} (spread {min_spread:.3e})")]
    NonRectifiable { t_star: f64, min_spread: f64 },

    #[error("resource limit: {0}")]
    Resource(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn at_point(index: usize, source: Error) -> Error {
        Error::AtPoint {
            index,
            source: Box::new(source),
        }
    }
}
