use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;

/// `n` draws from `N(0, std^2)`, sampled in f64 so every scalar width sees the
/// same stream.
pub fn normal<S: Scalar, R: Rng + ?Sized>(n: usize, std: f64, rng: &mut R) -> Vec<S> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            S::lit(z * std)
        })
        .collect()
}

/// Uniform `(-bound, bound)` draws.
pub fn uniform<S: Scalar, R: Rng + ?Sized>(n: usize, bound: f64, rng: &mut R) -> Vec<S> {
    (0..n).map(|_| S::lit(rng.gen_range(-bound..bound))).collect()
}
