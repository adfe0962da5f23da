//! Model-free opponent shaping for token-policy agents in repeated 2×2
//! matrix games.
//!
//! Agents emit single tokens from a small vocabulary; two tokens are legal
//! actions and the rest map to a null action with a penalty payoff. A naive
//! agent learns with PPO within episodes, while a shaper observes whole
//! trials of several episodes and learns to steer the naive learner.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod game;
pub mod observation;
pub mod orchestrator;
pub mod policy;
pub mod ppo;
pub mod run;

pub use error::{Error, Result};
