//! Deterministic 2D multi-agent racing simulator and autonomy stack.

pub mod error;
pub mod geometry;
pub mod harness;
pub mod lidar;
pub mod mpc;
pub mod perception;
pub mod planner;
pub mod plot;
pub mod raceline;
pub mod scenario;
pub mod sim;
pub mod trace;
pub mod track;

pub use error::{Error, Result};
