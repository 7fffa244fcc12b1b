//! Deterministic RNG stream derivation.
//!
//! Every random draw in a run comes from a stream keyed by
//! `(seed, purpose, client, round)`, so one client's sampling never depends
//! on how many draws another component made.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Partition = 2,
    Batches = 3,
    Attack = 4,
    Data = 5,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn stream(seed: u64, purpose: Purpose, client: u64, round: u64) -> StreamRng {
    let mut h = splitmix64(seed);
    for word in [purpose as u64, client, round] {
        h = splitmix64(h ^ word);
    }
    ChaCha8Rng::seed_from_u64(h)
}
