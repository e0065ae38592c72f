//! Deterministic seed derivation.
//!
//! Every random decision in the toolkit draws from a ChaCha stream seeded by
//! mixing a root seed with structural indices (record index, epoch, step,
//! batch slot). Derived streams are independent of iteration order, so
//! records can be generated or augmented in any order without changing
//! results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; full-avalanche mix of one word into the state.
fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Mixes a root seed with a list of stream indices into a single u64.
pub fn mix_seed(root: u64, parts: &[u64]) -> u64 {
    let mut acc = splitmix64(root);
    for &p in parts {
        acc = splitmix64(acc ^ splitmix64(p));
    }
    acc
}

/// Derives an independent RNG stream from a root seed and indices.
pub fn derive_rng(root: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(root, parts))
}
