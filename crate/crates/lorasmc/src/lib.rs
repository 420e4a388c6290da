//! Stochastic low-rank RNNs fit with variational sequential Monte Carlo.

pub mod activation;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod fixed_points;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod observation;
pub mod smc;
pub mod tape;
pub mod training;

pub use error::{Error, Result};
