//! Experiment runner for learning-for-retention fine-tuning: configuration,
//! checkpoints, the artifact workspace and the pipeline commands.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod results;
pub mod workspace;

pub use lfr_core as core;
