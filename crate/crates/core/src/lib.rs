//! Sampling-based model predictive control with MPPI and covariance-optimal
//! sampling.

pub mod controller;
pub mod cost;
pub mod covariance;
pub mod env;
pub mod mppi;
pub mod error;
pub mod numerics;
pub mod sequence;
pub mod theory;

pub use error::{Error, Result};
pub use sequence::ControlSequence;
