//! Deterministic random-stream derivation.
//!
//! Every random decision in a run draws from a ChaCha8 stream whose 256-bit
//! key is the little-endian concatenation
//!
//! ```text
//! seed (8 bytes) | purpose (4) | island (4) | iteration (8) | index (8)
//! ```
//!
//! so streams are independent across islands, purposes, iterations and
//! particles, and a run is bit-reproducible regardless of thread count.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum Purpose {
    Init = 1,
    Resample = 2,
    Thompson = 3,
    Accept = 4,
    Proposal = 5,
    Migration = 6,
    Experiment = 7,
}

/// Stream for `(purpose, island, iteration, index)` under `seed`.
pub fn stream(seed: u64, purpose: Purpose, island: usize, iteration: usize, index: usize) -> StreamRng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..12].copy_from_slice(&(purpose as u32).to_le_bytes());
    key[12..16].copy_from_slice(&(island as u32).to_le_bytes());
    key[16..24].copy_from_slice(&(iteration as u64).to_le_bytes());
    key[24..32].copy_from_slice(&(index as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
