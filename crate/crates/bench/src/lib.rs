//! Shared fixtures for the benchmarks.

use deepclust::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

pub fn labels(r: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..k)).collect()
}

/// `k` well separated blobs in `d` dimensions.
pub fn blobs(r: &mut ChaCha8Rng, n: usize, k: usize, d: usize) -> Tensor {
    let centers = uniform(r, &[k, d], -20.0, 20.0);
    let data = (0..n)
        .flat_map(|i| centers.row(i % k).to_vec())
        .map(|c| c + r.random_range(-1.0..1.0))
        .collect();
    Tensor::new(vec![n, d], data).unwrap()
}
