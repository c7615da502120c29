//! Configuration, dataset generation, checkpoints, ablations and the CLI.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod pipeline;
