use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    /// The DC voltage fell below the constant-power-load guard.
    #[error("degenerate state: v = {v} V is below the CPL guard v_min = {v_min} V")]
    DegenerateState { v: f64, v_min: f64 },

    #[error("infeasible operating point: power-balance discriminant {discriminant} < 0")]
    InfeasibleOperatingPoint { discriminant: f64 },

    #[error("duty ratio {0} outside [-1, 1]")]
    DutyOutOfRange(f64),

    #[error("power factor undefined: zero RMS {0}")]
    UndefinedPowerFactor(&'static str),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }
}
