//! Transient simulation of gas pipeline networks and joint estimation of
//! state and pipe friction from sparse measurements.

pub mod cases;
pub mod cli;
pub mod dae;
pub mod error;
pub mod estimator;
pub mod ipm;
pub mod network;
pub mod nondim;
pub mod profiles;
pub mod refinement;
pub mod simulator;
pub mod sparse;
pub mod timeseries;

pub use error::{Error, Result};
