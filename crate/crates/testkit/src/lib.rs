//! Oracles that do not share code with the engine: central finite
//! differences, brute-force loop kernels, a least-norm construction for the
//! Bayes loss, and the synthetic overfit harness.

pub mod bayes;
pub mod gradcheck;
pub mod oracles;
pub mod overfit;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values in `[lo, hi)`.
pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// `max |a − b| / max |b|`: error relative to the reference's scale.
pub fn normwise_relative(a: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(a.len(), reference.len(), "length mismatch");
    let diff = a.iter().zip(reference).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = reference.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if diff == 0.0 {
        0.0
    } else {
        diff / scale.max(f64::MIN_POSITIVE)
    }
}
