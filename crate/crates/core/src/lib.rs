//! Risky-state forecasting for a cloud subsystem, modeled as a Markov
//! decision process over discretized per-second traffic features.
//!
//! The pipeline runs in stages:
//!
//! 1. [`features`] — generate (or ingest) per-second feature records.
//! 2. [`discretize`] — bin the continuous features and enumerate the
//!    original state space.
//! 3. [`cluster`] — abstract the original states into K clusters
//!    (k-means with Euclidean or Mahalanobis distance, or a GMM).
//! 4. [`mdp`] — label states by risk and assemble the reward and
//!    transition matrices of the MDP.
//! 5. [`solver`] — solve for the optimal policy with a suite of
//!    dynamic-programming algorithms.
//! 6. [`evaluate`] — lift the policy back to the original space and
//!    score its accuracy.
//! 7. [`predict`] — expand the policy-driven transition tree and report
//!    reachable risky states with their probabilities.
//!
//! [`pipeline`] ties the stages together behind a single configuration
//! and handles artifact persistence; the `riskmdp` binary is a thin
//! wrapper over it.

pub mod cluster;
pub mod discretize;
pub mod error;
pub mod evaluate;
pub mod features;
pub mod mdp;
pub mod pipeline;
pub mod predict;
pub mod solver;

pub use error::{Error, Result};
