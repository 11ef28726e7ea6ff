//! Radio-unit sleep-mode control for shared, sliced radio access networks.
//!
//! The crate simulates a MAC scheduler that defers downlink traffic to
//! consolidate idle time, an RU that exploits that idle time with advanced
//! sleep modes, and a constrained distributional actor-critic that picks the
//! deferral threshold every decision step.

pub mod baselines;
pub mod controller;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod radio;
pub mod ru;
pub mod sim;
pub mod traces;

pub use error::{Error, Result};
