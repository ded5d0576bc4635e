//! Reconstructs passenger rail trajectories from fare-gate and train-event logs.

pub mod candidates;
pub mod config;
pub mod error;
pub mod eval;
pub mod inference;
pub mod itinerary;
pub mod klem;
pub mod load;
pub mod model;
pub mod pipeline;
pub mod prob;
pub mod synth;
pub mod time;

pub use error::{Error, Result};
