#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod classifier;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod image;
pub mod losses;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod tensor;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use image::Image;
pub use tensor::{ConvGeom, Real, Tensor};
