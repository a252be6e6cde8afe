//! Seeded randomness. Every random decision in training derives its stream
//! from `(seed, purpose, step)`, so resuming at step `t` replays exactly what
//! an uninterrupted run would have drawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::real::Real;
use crate::tensor::Tensor;

pub type DetRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for `(seed, purpose, step)`.
pub fn stream(seed: u64, purpose: u64, step: u64) -> DetRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 40) ^ step);
    rng
}

pub fn normal_tensor<T: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = rng.sample(StandardNormal);
        T::lit(z * std)
    })
}

pub fn uniform_tensor<T: Real>(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(lo..hi)))
}

/// Fisher–Yates permutation of `0..n`.
pub fn permutation(n: usize, rng: &mut impl Rng) -> alloc::vec::Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: alloc::vec::Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
