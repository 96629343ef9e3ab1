//! Seed derivation. Every random draw in the crate comes from a ChaCha8
//! stream keyed by a user seed plus a tag path, so independent consumers
//! (batch order, per-example noise, generation) never share a stream and
//! resumed runs can rebuild any stream from counters alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn seeded(seed: u64, tags: &[u64]) -> Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, tags))
}

pub fn normal_vec<R: rand::Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
