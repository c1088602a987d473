//! Exact Markov chains, mean-field approximations and Monte Carlo
//! simulation for SIS, SIRS and SIV epidemics on networks.

pub mod chain;
pub mod error;
pub mod graph;
pub mod meanfield;
pub mod model;
pub mod montecarlo;
pub mod spectral;
pub mod verify;

pub use error::{EpiError, Result};
pub use graph::{Graph, GraphKind};
pub use meanfield::{Classification, FixedPointOptions, FixedPointReport, MeanFieldPoint};
pub use model::{ModelSpec, Rates, Variant};
