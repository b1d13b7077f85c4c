//! Asynchronous federated learning with distributed dropout: masked write-back,
//! heterogeneous submodel assignment, baseline strategies, a discrete-event simulator
//! and kernel-based convergence checks for the one-hidden-layer CNN.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod masking;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod sim;
pub mod store;
pub mod strategies;
pub mod theory;

pub use error::{Error, Result};
