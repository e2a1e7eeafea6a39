pub mod config;
pub mod diff;
pub mod env;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod heuristics;
pub mod oracle;
pub mod planner;
pub mod trainer;
pub mod world_model;

pub use error::{Error, Result};
