//! Deterministic random-stream derivation.
//!
//! All randomness in the crate flows from a single `u64` seed. Independent
//! consumers (weight init, per-item data sampling, validation items, ...)
//! derive their own ChaCha8 stream from `(seed, salt, index)`, so work can
//! be reordered or parallelized without changing any draw.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream salts. Each consumer gets its own namespace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Parameter initialization.
    Init,
    /// Training item `index` (global, i.e. iteration * batch + slot).
    TrainItem(u64),
    /// Fixed validation item `index`.
    ValItem(u64),
    /// Evaluation item `index`.
    EvalItem(u64),
    /// Synthetic dataset generation, keyed by recording id.
    Synthetic(u64),
}

impl Stream {
    fn salt(self) -> (u64, u64) {
        match self {
            Stream::Init => (1, 0),
            Stream::TrainItem(i) => (2, i),
            Stream::ValItem(i) => (3, i),
            Stream::EvalItem(i) => (4, i),
            Stream::Synthetic(i) => (5, i),
        }
    }
}

/// Derive the ChaCha8 stream for `(seed, stream)`.
pub fn derive(seed: u64, stream: Stream) -> ChaCha8Rng {
    let (tag, index) = stream.salt();
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tag.to_le_bytes());
    key[16..24].copy_from_slice(&splitmix(seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)).to_le_bytes());
    key[24..32].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// splitmix64 finalizer; decorrelates nearby seeds.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
