//! Shared fixtures for the benchmarks.

use fedrobust::UpdateVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `k` updates of dimension `d` with coordinates uniform in `[-1, 1)`.
pub fn random_updates(k: usize, d: usize, seed: u64) -> Vec<UpdateVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| UpdateVector::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("finite"))
        .collect()
}

/// MNIST-shaped inputs: `n` rows of 784 pixels, about 19% nonzero.
pub fn sparse_images(n: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pixels = (0..n * 784)
        .map(|_| if rng.random_bool(0.19) { rng.random_range(0.0..1.0) } else { 0.0 })
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..10)).collect();
    (pixels, labels)
}
