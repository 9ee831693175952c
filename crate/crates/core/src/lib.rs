//! Replicable bandit algorithms and a paired-run simulation harness.
//!
//! - [`repmean`]: replicable scalar mean estimation on a shifted grid.
//! - [`repucb`]: batched UCB for K-armed bandits built on `repmean`.
//! - [`repridge`]: ridge regression rounded in whitened coordinates.
//! - [`replinucb`]: determinant-batched linear UCB built on `repridge`.
//! - [`harness`]: paired executions with shared internal randomness and
//!   independent reward noise, replicability rates and diagnostic checks.
//! - [`checks`]: Monte Carlo self-tests for the two estimators.
//! - [`cli`]: configuration files, experiment runs and result files.
//!
//! All randomness flows through [`randomness::SeedPlan`], so every run is a
//! pure function of the master seed, the trial id and the configuration.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod cli;
pub mod environment;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod randomness;
pub mod replinucb;
pub mod repmean;
pub mod repridge;
pub mod repucb;

pub use error::{Error, Result};
