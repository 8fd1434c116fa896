//! Experiment runner for federated GAN fusion: config parsing, the demo
//! pipelines, output staging, and PPM scatter plots.

pub mod commands;
pub mod config;
pub mod output;
pub mod pipeline;
pub mod render;

pub use config::{Demo, RunConfig};
