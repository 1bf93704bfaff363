//! Synthetic benchmark, metrics and experiment runner for the slow/fast
//! video network in `vidprop-core`.

pub mod data;
pub mod metrics;
pub mod config;
pub mod experiment;
pub mod features;
pub mod plot;
pub mod checks;
