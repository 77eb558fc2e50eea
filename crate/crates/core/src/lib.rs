//! Post-hoc confidence scoring for trained networks from per-layer
//! corevector statistics.

pub mod affine;
pub mod association;
pub mod baselines;
pub mod cli;
pub mod corevector;
pub mod error;
pub mod gmm;
pub mod metrics;
pub mod pipeline;
pub mod refnet;
pub mod rng;
pub mod scoring;
pub mod tensor;

pub use error::{Error, Result};
