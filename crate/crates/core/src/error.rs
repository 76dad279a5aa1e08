use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("svd did not converge after {sweeps} sweeps (residual {residual:e})")]
    Convergence { sweeps: usize, residual: f64 },
    #[error("out of range: {0}")]
    Range(String),
    #[error("sequence capacity exceeded: position {pos} >= max_seq {max_seq}")]
    Capacity { pos: usize, max_seq: usize },
    #[error("policy error: {0}")]
    Policy(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("state error: {0}")]
    State(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("at step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            e @ Error::AtStep { .. } => e,
            e => Error::AtStep {
                step,
                source: Box::new(e),
            },
        }
    }

    /// Process exit code: 2 config, 3 input format, 4 runtime/policy.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Calibration(_) => 2,
            Error::Format(_) | Error::Io(_) => 3,
            Error::AtStep { source, .. } => source.exit_code(),
            _ => 4,
        }
    }
}
