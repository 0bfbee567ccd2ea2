//! Deep Q-learning agents that navigate a grid of image observations toward a
//! goal region: the grid environment, a synthetic subject generator, a small
//! from-scratch convolutional network, prioritized replay, the training loops
//! and the evaluation metrics.

pub mod agent;
pub mod env;
pub mod eval;
pub mod error;
mod io;
pub mod nn;
pub mod replay;
pub mod synth;

pub use error::{Error, Result};
