//! Seed derivation. Every random draw comes from a [`ChaCha8Rng`] seeded by
//! hashing the base seed with a stream name and an index, so commands and
//! sweep points never share a stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Named sub-streams of a run's single seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data,
    Init,
    Sampling,
    Sweep,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Data => "data",
            Stream::Init => "init",
            Stream::Sampling => "sampling",
            Stream::Sweep => "sweep",
        }
    }
}

/// First 32 bytes of `SHA-256(base ‖ name ‖ index)`.
pub fn derive_seed(base: u64, name: &str, index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(base.to_le_bytes());
    h.update((name.len() as u64).to_le_bytes());
    h.update(name.as_bytes());
    h.update(index.to_le_bytes());
    h.finalize().into()
}

/// A 64-bit seed for APIs that take one (e.g. nested derivations).
pub fn derive_u64(base: u64, name: &str, index: u64) -> u64 {
    let s = derive_seed(base, name, index);
    u64::from_le_bytes(s[..8].try_into().unwrap())
}

pub fn stream(base: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(base, stream.name(), index))
}

pub fn named(base: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_seed(base, name, index))
}
