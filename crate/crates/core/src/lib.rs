//! Decentralized personalized federated learning with score-based peer
//! selection.
//!
//! Each client keeps a model split into shared feature layers and a private
//! header. Every round a client scores its visible peers, averages its feature
//! layers with the chosen ones, trains the features with the header frozen,
//! then trains the header with the features frozen, and publishes the result.
//!
//! The crate is organized bottom-up:
//!
//! - [`nn`]: dense matrices, the split MLP, SGD with momentum, gradient checks
//! - [`data`]: synthetic blobs, pathological partitioning, flat-file datasets
//! - [`scoring`]: per-peer scores, selection, and selection skew
//! - [`client`]: one client's round operations
//! - [`sim`]: round orchestration and baselines
//! - [`metrics`], [`config`], [`cli`]: experiment plumbing

// Range checks are written as `!(x > 0.0)` on purpose so NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod client;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod scoring;
pub mod sim;

pub use config::{SimConfig, Strategy};
pub use error::{Error, Result};
pub use sim::{run_simulation, SimOutput, Simulation};
