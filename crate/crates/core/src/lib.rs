//! User-guided manga colorization.

pub mod checkpoint;
pub mod cli;
pub mod colorspace;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod losses;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod priors;
pub mod raster;
pub mod service;

pub use error::{Error, Result};
