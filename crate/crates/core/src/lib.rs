//! Coordinated platooning and traffic-signal control on grid networks.
//!
//! The crate bundles a microscopic traffic simulator, heterogeneous graph
//! policy/value networks for signal and platoon agents, and a PPO trainer
//! that alternates between the two agent classes.

pub mod agents;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod net;
pub mod nn;
pub mod platoon;
pub mod signal;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
