//! Staypoint geo-statistics for GPS trajectory datasets, a seedable
//! needs-driven mobility simulator, and a genetic algorithm that calibrates
//! the simulator so its trajectories match a target dataset's statistics.

pub mod calibrate;
pub mod error;
pub mod export;
pub mod geodata;
pub mod metrics;
pub mod simulate;
pub mod staypoints;

pub use error::{Error, Result};
