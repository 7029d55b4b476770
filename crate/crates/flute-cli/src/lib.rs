//! Experiment runner library behind the `flute-sim` binary: TOML config
//! parsing and multi-seed trace/summary emission.

pub mod config;
pub mod run;
