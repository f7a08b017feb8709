//! Kernel-based LPV identification, constrained MPC and recurrent-network
//! imitation control for a diesel engine, exercised against a deterministic
//! mean-value surrogate plant.

pub mod dataset;
pub mod error;
pub mod harness;
pub mod hyperopt;
pub mod imitation;
pub mod linear;
pub mod lpv;
pub mod mpc;
pub mod plant;

pub use error::{Error, Result};
