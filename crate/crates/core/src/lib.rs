//! Score-based generative modelling for multivariate time-series anomaly
//! detection.

pub mod anomaly;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod nn;
pub mod ode;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod sde;
pub mod train;

pub use error::{Error, Result};
