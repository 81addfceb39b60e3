//! Risk-sensitive value functions for finite-horizon MDPs and their
//! particle-filter approximation.
//!
//! The library is organized around six pieces:
//!
//! - [`mdp`]: finite-horizon MDPs, tabular softmax policies, trajectory
//!   sampling, and brute-force trajectory enumeration.
//! - [`exact`]: exact certain equivalents, risk-sensitive values and Q values
//!   via the multiplicative Bellman recursion (computed in log-space).
//! - [`pvf`]: the bootstrap particle filter estimator of the risk-sensitive
//!   value, its Monte Carlo wrapper, and an exact product-space evaluator for
//!   tiny instances.
//! - [`gradients`]: REINFORCE, particle-filter, and multi-sample (VIMCO-style)
//!   policy-gradient estimators together with their exact and
//!   finite-difference oracles.
//! - [`envs`]: the two benchmark environments (a two-state risk example and
//!   Cliffworld).
//! - [`harness`]: training loop, hyperparameter sweeps, evaluation metrics.

pub mod envs;
pub mod error;
pub mod exact;
pub mod gradients;
pub mod harness;
pub mod mdp;
pub mod pvf;
pub mod util;

pub use error::Error;
pub use mdp::{AliasedBernoulliPolicy, FiniteMdp, Policy, TabularPolicy, Trajectory};
pub use pvf::{ParticleSystem, PvfEstimate};

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
