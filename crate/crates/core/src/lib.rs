//! Unsupervised part discovery by masked restoration with learned part
//! descriptors.

pub mod autograd;
pub mod backbone;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod inference;
pub mod losses;
pub mod masking;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod raster;
pub mod restoration;
pub mod spatial;
pub mod tensors_io;

pub use error::{Error, Result};
