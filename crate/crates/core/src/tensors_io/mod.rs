//! Dense-array container, deterministic random streams, and run configuration.

pub mod config;
pub mod dna;
pub mod rng;

pub use config::{load_config, DistributionLoss, NmiNorm, RunConfig};
pub use dna::{load_array, save_array, ArrayData, DType, DenseArray};
pub use rng::{labeled_stream, stream, Rng, Stream};
