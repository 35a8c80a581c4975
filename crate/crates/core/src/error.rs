use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("matrix is singular (pivot {pivot:e} at column {column})")]
    SingularMatrix { column: usize, pivot: f64 },

    #[error("matrix exponential overflow (intermediate magnitude {0:e})")]
    ExpmOverflow(f64),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite gradient component at index {0}")]
    NonFiniteGradient(usize),

    #[error("Newton iteration diverged after {iterations} iterations (residual {residual:e})")]
    NewtonDiverged { iterations: usize, residual: f64 },

    #[error("implicit step Jacobian is singular")]
    SingularJacobian,

    #[error("step size fell below minimum ({0:e})")]
    MinStepReached(f64),

    #[error("step failed on interval {index}: {source}")]
    Interval {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("segment {index} failed: {source}")]
    Segment {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite loss")]
    NonFiniteLoss,

    #[error("reference refinement did not converge on interval {0} after {1} halvings")]
    RefinementFailed(usize, usize),

    #[error("time-dependent vector fields are not supported")]
    TimeDependentField,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("unknown {kind} '{name}'")]
    Unknown { kind: &'static str, name: String },

    #[error("I/O error: {0}")]
    Io(String),
}

impl Error {
    /// Strips `Interval`/`Segment` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Interval { source, .. } | Error::Segment { source, .. } => source.root(),
            other => other,
        }
    }

    /// Numerical divergence of a solver, as opposed to bad input.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self.root(),
            Error::NewtonDiverged { .. }
                | Error::SingularJacobian
                | Error::NonFiniteLoss
                | Error::NonFinite(_)
                | Error::NonFiniteGradient(_)
                | Error::ExpmOverflow(_)
                | Error::MinStepReached(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
