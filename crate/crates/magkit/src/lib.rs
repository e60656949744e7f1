//! File formats, dataset loading, checkpoints and the training driver built
//! on `magkit-core`.

pub use magkit_core as core;

pub mod attributes;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod imageio;
pub mod masks;
pub mod relations;
pub mod trainer;

pub use error::{Error, Result};
