//! Training, checkpointing, evaluation, sweeps and gradient checking.

pub mod checkpoint;
pub mod evaluate;
pub mod gradcheck;
pub mod train;
