//! Seeded parameter initialization.

use crate::Real;
use rand::Rng;

/// Uniform fan-in scaled initialization, `U(-1/√fan_in, 1/√fan_in)`.
pub fn fan_in_uniform<T: Real, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, n: usize) -> Vec<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
}

pub fn constant<T: Real>(v: f64, n: usize) -> Vec<T> {
    vec![T::of(v); n]
}
