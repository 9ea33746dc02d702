//! Replayable random streams.
//!
//! Every stream is a ChaCha8 generator keyed by `(master_seed, rep_id)` with
//! a 64-bit stream id selecting the entity. ChaCha8 from `rand_chacha` 0.9
//! is pinned here, so a given triple always yields the same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum StreamKind {
    Channel = 1,
    Arrival = 2,
    PolicyUser = 3,
    PolicyShared = 4,
}

pub fn stream(master_seed: u64, rep_id: u64, kind: StreamKind, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&master_seed.to_le_bytes());
    key[8..16].copy_from_slice(&rep_id.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(((kind as u64) << 48) | index);
    rng
}

pub fn streams(master_seed: u64, rep_id: u64, kind: StreamKind, n: usize) -> Vec<ChaCha8Rng> {
    (0..n as u64).map(|i| stream(master_seed, rep_id, kind, i)).collect()
}
