//! Discrete-event simulator for live rescaling of keyed stream operators.

pub mod channel;
pub mod clock;
pub mod config;
pub mod control;
pub mod error;
pub mod graph;
pub mod harness;
pub mod ids;
pub mod message;
pub mod protocol;
pub mod sim;
pub mod state;
pub mod trace;

pub use error::{Error, Result};
pub use ids::*;
