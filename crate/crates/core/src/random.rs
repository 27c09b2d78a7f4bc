//! Seeded tensor sampling. Every random draw in the crate goes through a
//! ChaCha8 stream so runs are reproducible across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

pub type Rng64 = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng64 {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform samples in `[lo, hi)` from a fresh stream seeded with `seed`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    uniform_with(&mut rng(seed), shape, lo, hi)
}

pub fn uniform_with(rng: &mut Rng64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}
