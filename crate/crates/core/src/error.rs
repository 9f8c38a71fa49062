use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input outside the domain of a map (e.g. φ⁻¹ evaluated at x ≤ ω).
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical error: {message} (residual estimate {residual:e})")]
    Numerical { message: String, residual: f64 },

    #[error("solver did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },

    #[error("non-finite loss at step {step}: log p_w = {log_p_w}, log p_l = {log_p_l}, loss = {loss}")]
    NonFiniteLoss {
        step: usize,
        log_p_w: f64,
        log_p_l: f64,
        loss: f64,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    /// Short machine-readable tag, used by the command-line front end.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Numerical { .. } => "numerical",
            Error::NonConvergence { .. } => "non_convergence",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Parse { .. } => "parse",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
