//! Seeded random streams. Every stochastic operation takes an explicit
//! generator so runs are reproducible from a single integer seed.

use alloc::vec::Vec;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::real::Real;
use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn substream(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Serializable position of a generator: `(seed, stream, word position)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

pub fn save_state(r: &Rng) -> RngState {
    RngState {
        seed: r.get_seed(),
        stream: r.get_stream(),
        word_pos: r.get_word_pos(),
    }
}

pub fn restore_state(s: &RngState) -> Rng {
    let mut r = ChaCha8Rng::from_seed(s.seed);
    r.set_stream(s.stream);
    r.set_word_pos(s.word_pos);
    r
}

pub fn normal(r: &mut Rng) -> f64 {
    r.sample(StandardNormal)
}

pub fn uniform(r: &mut Rng) -> f64 {
    r.random::<f64>()
}

/// Uniform integer in `lo..=hi`.
pub fn int_in(r: &mut Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

pub fn next_u64(r: &mut Rng) -> u64 {
    r.random::<u64>()
}

pub fn normal_vec(r: &mut Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| normal(r) as f32).collect()
}

/// `N(0, std^2)` initialized tensor.
pub fn normal_tensor<T: Real>(r: &mut Rng, shape: &[usize], std: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(normal(r) * std))
}

/// Fisher-Yates shuffle.
pub fn shuffle<X>(r: &mut Rng, items: &mut [X]) {
    for i in (1..items.len()).rev() {
        let j = r.random_range(0..=i);
        items.swap(i, j);
    }
}
