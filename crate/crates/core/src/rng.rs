//! Deterministic random numbers.
//!
//! All sampling goes through SplitMix64 (64-bit state, Steele, Lea and Flood
//! 2014) as implemented by `rand_xoshiro`, so every seeded run is reproducible
//! across platforms.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
pub use rand_xoshiro::SplitMix64;

use crate::tensor::Tensor;

pub type DetRng = SplitMix64;

pub fn seeded(seed: u64) -> DetRng {
    SplitMix64::seed_from_u64(seed)
}

/// Derives an independent stream seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    let mut rng = SplitMix64::seed_from_u64(seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.gen()
}

/// Matrix with entries uniform in `[-bound, bound)`; zeros when `bound` is 0.
pub fn uniform(rng: &mut DetRng, rows: usize, cols: usize, bound: f64) -> Tensor {
    if bound == 0.0 {
        return Tensor::zeros(rows, cols);
    }
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

/// `amount` distinct indices out of `0..len`, in sampling order.
pub fn sample_indices(rng: &mut DetRng, len: usize, amount: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, len, amount).into_vec()
}

pub fn shuffle<T>(rng: &mut DetRng, items: &mut [T]) {
    items.shuffle(rng);
}
