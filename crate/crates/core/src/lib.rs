//! Open-set object detection toolkit.
//!
//! Discovers unknown objects from objectness statistics, trains a toy
//! two-stage detector with an extra unknown class on synthetic scenes, rejects
//! unknowns with several scoring rules and evaluates the result with open-set
//! detection metrics.

pub mod cli;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod pseudolabel;
pub mod rejection;
pub mod sim;

pub use error::{Error, Result};
