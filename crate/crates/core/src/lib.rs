//! Quasi-Newton actor-critic for linear policies.
//!
//! The crate provides the environments (discounted LQR and a cart-pendulum),
//! linear policies, the compatible quadratic critic fitted by three-stage
//! LSTD, first-order and damped quasi-Newton actor updates, a training loop,
//! and an exact Riccati oracle used to check the sampled estimates.

pub mod actor;
pub mod config;
pub mod critic;
pub mod envs;
pub mod error;
pub mod experiment;
pub mod linalg;
pub mod lstd;
pub mod mdp;
pub mod oracle;
pub mod policies;
pub mod report;
pub mod trainer;

pub use actor::Method;
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use linalg::{Mat, Vector};
pub use trainer::{train, RunStatus, TrainConfig, TrainOutcome};
