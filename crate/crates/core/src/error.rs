use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("step limit exceeded at t = {t}, h = {h}; problem is stiff or tolerances too tight")]
    Stiffness { t: f64, h: f64 },

    #[error("solver produced a non-finite state; last good t = {last_t}")]
    SolverFailure { last_t: f64 },

    #[error("undefined metric: {0}")]
    Undefined(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for failures caused by numerics (NaN, divergence, stiffness) as
    /// opposed to misuse or I/O.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::Stiffness { .. } | Error::SolverFailure { .. }
        )
    }
}
