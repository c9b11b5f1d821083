//! Simulator for federated parameter-efficient tuning of a small transformer.

pub mod accounting;
pub mod attack;
pub mod data;
pub mod delta;
pub mod error;
pub mod federation;
pub mod model;
pub mod optim;
pub mod partition;
pub mod rng;
pub mod train;
pub mod wire;

pub use error::{Error, Result};
