//! Multi-game visual representation pre-training for reinforcement learning.

mod error;

pub mod analysis;
pub mod augment;
pub mod config;
pub mod data;
pub mod evalstats;
pub mod finetune;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod pretrain;

pub use error::{Error, Result};
