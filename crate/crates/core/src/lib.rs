//! Deterministic federated-learning simulator.
//!
//! The centerpiece is the [`strategies::FedAr`] aggregator, which keeps the
//! last update of every client, reuses stale updates with a staleness-based
//! weight, and drops updates that are too old. Six comparison strategies
//! share the same [`strategies::Strategy`] interface. The [`engine`] runs
//! rounds over non-IID client shards with Bernoulli or scripted availability,
//! [`analysis`] provides the accuracy statistics, Shapley contributions and
//! paired t-tests, and [`output`] writes the run artifacts.

pub mod analysis;
pub mod availability;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod model;
pub mod output;
pub mod params;
pub mod rng;
pub mod strategies;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use params::ParamVector;
