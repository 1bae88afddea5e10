//! Decentralized stochastic minimax optimization.
//!
//! - [`topology`]: graphs and symmetric doubly stochastic mixing matrices.
//! - [`strategy`]: the unified `(A, B, C)` matrix choices (ED, EXTRA and three
//!   gradient-tracking variants) and their validators.
//! - [`problems`]: stochastic minimax objectives with per-sample gradients.
//! - [`grace`]: the probabilistic gradient estimator and its named special cases.
//! - [`engine`]: the run loop in general primal-dual or node-level form.
//! - [`transform`]: the transformed recursion used to verify runs.
//! - [`metrics`]: per-round gradient and consensus measurements, CSV output.

pub mod engine;
pub mod error;
pub mod grace;
pub mod metrics;
pub mod problems;
pub mod strategy;
pub mod topology;
pub mod transform;

pub use error::{Error, Result};
