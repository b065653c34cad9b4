use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the domain where the quantity is defined.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("time ordering error: t_to = {t_to} must be below t_from = {t_from}")]
    Ordering { t_from: f64, t_to: f64 },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("consistency error: {0}")]
    Consistency(String),
    #[error("coverage gap: {0}")]
    Coverage(String),
    #[error("numerical instability at step {step}: {what}")]
    Instability { step: usize, what: String },
    #[error("estimator failure: {0}")]
    Estimator(String),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    Iteration { iterations: usize, residual: f64 },
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("context error: {0}")]
    Context(String),
    #[error("predictor failed at rollout step {step}: {source}")]
    Rollout {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}
