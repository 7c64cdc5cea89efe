//! Experiment harness: configuration, synthetic data, training and pruning
//! sweeps, convergence benchmarks and file formats.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod io;
pub mod lab;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
