use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite {what}: {value}")]
    NonFinite { what: &'static str, value: f64 },

    #[error("degenerate model: {0}")]
    Degenerate(String),

    /// Operation is undefined in the current harvesting regime.
    #[error("{0}")]
    Regime(String),

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("replication {replication} exceeded the step cap of {cap}")]
    StepCap { replication: u64, cap: u64 },

    #[error("missing config key `{0}`")]
    MissingKey(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingKey(_) | Error::Config(_) | Error::Io(_) => 1,
            Error::NonConvergence { .. } | Error::StepCap { .. } => 3,
            Error::InvalidParameter(_)
            | Error::NonFinite { .. }
            | Error::Degenerate(_)
            | Error::Regime(_) => 2,
        }
    }
}

pub(crate) fn ensure_finite(what: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { what, value })
    }
}
