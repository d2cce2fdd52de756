//! Active learning for linear regression from a noisy, possibly strategic crowd.
//!
//! The crate is organised the way an experiment flows:
//!
//! - [`model`]: mean-field variational inference for Bayesian linear
//!   regression with one Gamma-distributed precision per annotator.
//! - [`features`]: normalization, k-means centers and the sigmoid distance
//!   transform.
//! - [`active`]: instance selection by posterior predictive variance.
//! - [`bandit`]: Robust UCB annotator selection with a truncated-mean
//!   estimator over negative squared residuals.
//! - [`crowd`]: the simulated annotator population.
//! - [`mechanism`]: the clamped linear payment rule.
//! - [`harness`]: data loading, the experiment loop and record emission.

pub mod active;
pub mod bandit;
pub mod crowd;
pub mod error;
pub mod features;
pub mod harness;
pub mod mechanism;
pub mod model;
pub mod seeding;

pub use error::{Error, Result};
