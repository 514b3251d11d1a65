//! File formats, IO, networking and the command-line pipeline around
//! [`stydeco_core`]: pseudo-pair distillation, training with checkpoints,
//! inference, evaluation and separation reports.

pub use stydeco_core as core;

pub mod checkpoint;
pub mod config_io;
pub mod distill;
pub mod error;
pub mod evaluate;
pub mod fixtures;
pub mod fsutil;
pub mod imageio;
pub mod inference;
pub mod manifest;
pub mod report;
pub mod trainer;

pub use error::{Error, Result};
