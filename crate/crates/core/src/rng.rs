//! Seeded randomness. Every random decision in a run flows from one `u64`
//! seed through the generator named in [`RNG_ALGORITHM`], which is written
//! into run manifests.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const RNG_ALGORITHM: &str = "chacha8/rand_chacha-0.9/seed_from_u64";

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A uniformly random permutation of `0..n` fixed by `seed`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    order
}
