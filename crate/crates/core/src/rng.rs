//! Keyed random substreams.
//!
//! Every random draw in an experiment comes from a ChaCha stream whose seed
//! is a hash of `(experiment seed, domain, a, b)`. Draws therefore depend
//! only on their key, never on call order, which makes runs reproducible
//! under parallel execution and lets different methods share the exact
//! same sample draws at a given `(agent, iteration)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Separates unrelated uses of the same experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    Graph = 1,
    Dataset = 2,
    Partition = 3,
    Quadratic = 4,
    Oracle = 5,
    CentralChoice = 6,
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a key tuple into a single 64-bit stream seed.
pub fn mix_key(seed: u64, domain: Domain, a: u64, b: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ domain as u64);
    h = splitmix64(h ^ a);
    splitmix64(h ^ b)
}

/// An independent stream for the key `(seed, domain, a, b)`.
pub fn substream(seed: u64, domain: Domain, a: u64, b: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_key(seed, domain, a, b))
}
