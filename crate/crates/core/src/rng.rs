//! Keyed random substreams.
//!
//! Every random draw in training and sampling comes from a ChaCha stream
//! keyed by `(seed, purpose, a, b)`, e.g. `(seed, Train, step, sample)`. A
//! draw therefore never depends on how work is batched or ordered.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Train = 3,
    Sample = 4,
    Probe = 5,
}

pub fn substream(seed: u64, purpose: Purpose, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    key[16..24].copy_from_slice(&a.to_le_bytes());
    key[24..].copy_from_slice(&b.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
