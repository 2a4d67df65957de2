//! Experiment runner for `crma-core`: config parsing, seeded sweeps, and the
//! tables and curves they produce.

pub mod config;
pub mod experiment;
