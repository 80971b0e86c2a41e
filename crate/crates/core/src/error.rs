//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter violates its domain (non-positive variance, bad fraction, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The model mean evaluated to a non-finite value; `latent` names the
    /// offending coordinate.
    #[error("non-finite model mean at t = {time}: latent `{latent}` drove the mean to {value}")]
    NonFiniteMean {
        time: f64,
        latent: String,
        value: f64,
    },

    /// A censored record has no imputed value where one is required.
    #[error("missing imputed value for subject `{subject}`, record {record}")]
    MissingImputation { subject: String, record: usize },

    /// The rejection sampler exceeded its attempt budget.
    #[error("sampler stalled on subject `{subject}`, block {block}: {attempts} attempts without acceptance")]
    SamplerStall {
        subject: String,
        block: &'static str,
        attempts: u64,
    },

    /// Too few subjects (or draws) to form the requested estimate.
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    /// A covariance or information matrix is not positive definite.
    #[error("singular matrix: {tag}")]
    SingularMatrix { tag: String },

    /// A parameter coordinate became non-finite during iteration.
    #[error("chain diverged at iteration {iteration}: {what}")]
    Divergence { iteration: usize, what: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Malformed dataset content; `line` is 1-based within the file.
    #[error("data error at line {line}: {message}")]
    Data { line: u64, message: String },

    #[error("scenario failed: {0}")]
    ScenarioFailed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
