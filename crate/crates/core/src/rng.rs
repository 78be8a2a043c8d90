//! Counter-based random streams.
//!
//! Every stochastic choice in a run draws from a stream keyed by
//! `(seed, client, round, purpose)`. The key is used directly as a ChaCha8
//! key, so streams for distinct keys are independent and the order in which
//! clients are processed never changes what any of them draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Client slot used for server-side or run-global streams.
pub const SERVER: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Probe = 3,
    Partition = 4,
    Synthesize = 5,
    Shift = 6,
    DiffusionTrain = 7,
    DiffusionSample = 8,
    Augment = 9,
    Generator = 10,
    Distill = 11,
    Pretrain = 12,
}

pub fn stream(seed: u64, client: u64, round: u64, purpose: Purpose) -> StreamRng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&client.to_le_bytes());
    key[16..24].copy_from_slice(&round.to_le_bytes());
    key[24..32].copy_from_slice(&(purpose as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
