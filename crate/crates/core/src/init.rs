//! Deterministic, name-keyed parameter initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Real, Tensor};

/// SplitMix64 finalizer; used to derive independent seeds from structured keys.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over the bytes of `name`, stable across platforms and releases.
pub fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn derive_seed(seed: u64, name: &str) -> u64 {
    mix64(seed ^ mix64(name_hash(name)))
}

pub fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, name))
}

/// He-uniform: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`, sampled in `f64`.
pub fn he_uniform<T: Real>(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor<T> {
    let limit = (6.0 / fan_in.max(1) as f64).sqrt();
    let mut rng = rng_for(seed, name);
    Tensor::from_fn(shape, |_| T::of(rng.gen_range(-limit..limit)))
}
