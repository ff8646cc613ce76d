//! Seeded random sources. Every stochastic step in the crate draws from a
//! `ChaCha8Rng` derived from an explicit seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::nn::{Array, Real};

pub type Rng64 = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for a named purpose under a base seed.
pub fn derive(seed: u64, purpose: &str) -> Rng64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for b in purpose.bytes() {
        h = splitmix(h ^ b as u64);
    }
    seeded(splitmix(h))
}

/// A child seed for a named purpose, for APIs that take plain seeds.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    use rand::RngCore;
    derive(seed, purpose).next_u64()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn normal_array<T: Real>(rng: &mut Rng64, shape: &[usize]) -> Array<T> {
    Array::from_fn(shape, |_| {
        let x: f64 = StandardNormal.sample(rng);
        T::of(x)
    })
}
