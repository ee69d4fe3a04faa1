//! Koopman model predictive control of a single-phase AC-DC boost rectifier.

pub mod baselines;
pub mod edmd;
pub mod error;
pub mod gssa;
pub mod harness;
pub mod kmpc;
pub mod params;
pub mod plant;
pub mod qp;

pub use error::{Error, Result};
pub use params::ConverterParams;
