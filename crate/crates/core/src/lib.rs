//! Frame-level bit allocation for hierarchical GOPs with a dual-critic DDPG
//! agent.
//!
//! * [`nn`]: dense networks, backprop, Adam, target-network updates, checkpoints.
//! * [`codec`]: GOP reference structure, parametric R-D simulator, subprocess encoder protocol.
//! * [`features`]: state encoding and the distortion / rate / combined rewards.
//! * [`ddpg`]: replay buffers, OU exploration noise, critic and actor updates.
//! * [`training`]: the agent, behavior cloning, dual-critic and single-critic training loops.
//! * [`eval`]: exhaustive oracle, rate deviation, PSNR, BD-rate, policy evaluation reports.

pub mod codec;
pub mod config;
pub mod ddpg;
pub mod error;
pub mod eval;
pub mod features;
pub mod nn;
pub mod training;

pub use error::{Error, Result};
