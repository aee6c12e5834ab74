//! Data generation, file formats, configuration and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod synthetic;
