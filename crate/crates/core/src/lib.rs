//! Graphon mean-field subsampling for cooperative heterogeneous multi-agent RL.
//!
//! Agents sit at latent coordinates and interact with intensities given by a
//! graphon. Each agent summarizes its neighborhood by sampling `kappa`
//! neighbors from its normalized graphon row and tallying their states, so
//! the learned Q-function is indexed by a histogram with denominator `kappa`
//! instead of the full population.
//!
//! - [`graphon`]: graphon models, latent coordinates, interaction weights.
//! - [`histogram`]: empirical histograms, stars-and-bars ranking, fibers.
//! - [`env`]: environments (warehouse benchmark, tabular, stochastic rewards).
//! - [`sampler`]: neighbor subsampling, aggregates, Horvitz-Thompson baseline.
//! - [`bellman`]: surrogate kernel, Bellman operators, value iteration,
//!   off-policy updates, Q-table files.
//! - [`execution`]: decentralized n-agent execution of a learned policy.
//! - [`harness`]: experiment configuration, kappa sweeps, diagnostics.

pub mod bellman;
pub mod env;
pub mod error;
pub mod execution;
pub mod graphon;
pub mod harness;
pub mod histogram;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
