//! Helpers shared by unit tests.

use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Deterministic values in `[-1, 1)`.
pub fn lcg(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
        .collect()
}

pub fn t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::from_vec(lcg(shape.iter().product(), seed), shape)
}

/// Central differences of a scalar function of one tensor.
pub fn numeric_grad(x: &Tensor<f64>, f: &dyn Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    let eps = 1e-6;
    let base = x.to_vec();
    (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] += eps;
            let mut m = base.clone();
            m[i] -= eps;
            (f(&Tensor::from_vec(p, x.shape())) - f(&Tensor::from_vec(m, x.shape()))) / (2.0 * eps)
        })
        .collect()
}

/// Elementwise closeness relative to the largest reference magnitude.
pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    let scale = b.iter().fold(1e-3f64, |m, v| m.max(v.abs()));
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol * scale, "index {i}: {x} vs {y}");
    }
}
