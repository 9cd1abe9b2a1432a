use thiserror::Error;

/// Errors produced by the integrators and their building blocks.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// An argument lies outside the domain of a function (basis index, log argument, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// A method or problem was configured inconsistently.
    #[error("configuration error: {0}")]
    Config(String),

    /// An iterative solve did not reach its tolerance.
    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    /// A closed-form step formula cannot be evaluated reliably at this state.
    #[error("ill-conditioned step: {0}")]
    IllConditioned(String),

    /// `I - zA` is singular: `z` is a pole of the stability function.
    #[error("stability function has a pole at the requested point")]
    Pole,

    /// A failure inside a multi-step integration, tagged with the failing step.
    #[error("step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// The innermost error, with step tagging removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
