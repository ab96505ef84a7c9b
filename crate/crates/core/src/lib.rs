//! Bayesian design of two-arm cluster randomised trials.

pub mod assurance;
pub mod bench;
pub mod cli;
pub mod config;
pub mod dist;
pub mod error;
pub mod laplace;
pub mod mcmc;
pub mod model;
pub mod power;
pub mod simulate;

#[cfg(test)]
mod testing;

pub use error::{Error, Result};
