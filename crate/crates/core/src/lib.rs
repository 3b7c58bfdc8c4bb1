//! Federated learning simulator for variational Bayesian neural networks.
//!
//! The crate is organized by stage of the simulation:
//!
//! - [`gauss_agg`]: the parametric Gaussian aggregation rules and the
//!   point average used by deterministic baselines.
//! - [`vbnn`]: the variational MLP, its objective, exact gradients and
//!   optimizer.
//! - [`fedsim`]: partitioning, client sampling, local training and the
//!   round loop.
//! - [`metrics`]: accuracy, calibration error, NLL, spread norm and round
//!   timing.
//! - [`data`], [`config`] and [`experiment`]: dataset ingestion, experiment
//!   configuration and the runner that writes result files.

pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fedsim;
pub mod gauss_agg;
pub mod metrics;
pub mod rng;
pub mod vbnn;

pub use error::{Error, Result};
