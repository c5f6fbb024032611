//! Configuration, presets, seed averaging and self-checks behind the
//! `depaint` binary.

pub mod average;
pub mod config;
pub mod presets;
pub mod verify;

pub use average::average_seeds;
pub use config::{parse_config, parse_config_str};
pub use presets::ExperimentPreset;
