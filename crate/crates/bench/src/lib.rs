//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semtok_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A `[rows, cols]` tensor of uniform values in `[-1, 1)`.
pub fn uniform(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
    let mut r = rng(seed);
    let data = (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect();
    Tensor::new([rows, cols], data).expect("shape matches data")
}

/// `count` images of shape `[height, width, channels]` in the normalized
/// pixel range.
pub fn images(count: usize, height: usize, width: usize, channels: usize, seed: u64) -> Vec<Tensor<f32>> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| {
            let data = (0..height * width * channels).map(|_| r.gen_range(-2.0..2.0)).collect();
            Tensor::new([height, width, channels], data).expect("shape matches data")
        })
        .collect()
}
