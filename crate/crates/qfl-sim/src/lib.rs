//! Desk-scale simulator for quantum federated learning with adaptive
//! differential privacy: dense statevector circuits, parameter-shift
//! training, calibrated Gaussian noise with a decaying schedule, magnitude
//! sparsification with an acceptance filter, federated orchestration, and
//! analysis harnesses for gradient-variance and convergence experiments.
//!
//! Run `cargo run --example <name>` for runnable walkthroughs of each
//! capability, or use the `qfl` binary for config-driven experiments.

pub mod analysis;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod privacy;
pub mod qnn;
pub mod server;
pub mod statevector;

pub use error::{QflError, Result};
