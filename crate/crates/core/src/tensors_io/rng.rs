//! Deterministic, purpose-split random streams.
//!
//! Every stream is a ChaCha8 generator whose 256-bit key is
//! `SHA-256("mpae-rng-v1" ‖ seed_le64 ‖ label ‖ 0x00 ‖ index_le64)`.
//! The generator is portable and counter-based, so a given
//! `(seed, label, index)` yields the same byte stream on every platform,
//! independent of what other streams were consumed before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Named stream purposes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Mask,
    Data,
    Init,
    Eval,
    Scene,
}

impl Stream {
    pub fn label(self) -> &'static str {
        match self {
            Stream::Mask => "mask",
            Stream::Data => "data",
            Stream::Init => "init",
            Stream::Eval => "eval",
            Stream::Scene => "scene",
        }
    }
}

pub fn stream(seed: u64, purpose: Stream, index: u64) -> Rng {
    labeled_stream(seed, purpose.label(), index)
}

pub fn labeled_stream(seed: u64, label: &str, index: u64) -> Rng {
    let mut h = Sha256::new();
    h.update(b"mpae-rng-v1");
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    h.update([0u8]);
    h.update(index.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
