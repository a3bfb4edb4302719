//! Deterministic randomness: one run seed, one independent stream per component.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named randomness consumers. Each gets its own ChaCha stream of the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Batches = 2,
    Gumbel = 3,
    Split = 4,
    Synth = 5,
    Finetune = 6,
    Reference = 7,
}

pub fn stream(seed: u64, which: Stream) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(which as u64);
    r
}

/// Mixes a run seed with a sub-key (SplitMix64 finalizer).
pub fn derive(seed: u64, key: u64) -> u64 {
    let mut z = seed ^ key.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
