//! Shared helpers for unit tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::ndtensor::{Real, Tensor};

pub fn randn_vec<T: Real>(len: usize, seed: u64, std: f64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).unwrap();
    (0..len).map(|_| T::of(dist.sample(&mut rng))).collect()
}

/// Seeded standard-normal leaf tensor (no gradient tracking).
pub fn randn_tensor<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let len = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), randn_vec(len, seed, 1.0))
}

/// Seeded standard-normal parameter tensor (tracks gradients).
pub fn randn_param<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let len = shape.iter().product();
    Tensor::param(shape.to_vec(), randn_vec(len, seed, 1.0))
}

/// Target tensor of `±magnitude` entries. With magnitude well above the
/// op's output range, an l1 readout against it is locally smooth (no
/// subgradient kink within finite-difference range) while still sending a
/// per-element ±1/n upstream gradient.
pub fn sign_target<T: Real>(shape: &[usize], seed: u64, magnitude: f64) -> Tensor<T> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| T::of(if rng.random::<bool>() { magnitude } else { -magnitude }))
        .collect();
    Tensor::from_vec(shape.to_vec(), data)
}

pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!(
        (a - b).abs() <= tol,
        "{what}: {a} vs {b} (|diff| = {} > {tol})",
        (a - b).abs()
    );
}

pub fn max_abs_diff<T: Real>(a: &[T], b: &[T]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}
