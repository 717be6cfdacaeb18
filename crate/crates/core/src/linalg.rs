//! Dense linear-algebra helpers shared by the training and analysis code.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::rng::Rng;

pub type Matrix = DMatrix<f64>;

pub fn frob_sq(m: &Matrix) -> f64 {
    m.iter().map(|v| v * v).sum()
}

pub fn is_finite(m: &Matrix) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn max_abs(m: &Matrix) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    // column-major fill order is part of the reproducibility contract
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(lo..=hi))
}

/// Largest eigenvalue of a symmetric positive semi-definite matrix by power
/// iteration, stopped when successive Rayleigh quotients agree to `rel_tol`.
pub fn power_iteration(a: &Matrix, rel_tol: f64, max_iter: usize) -> f64 {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "power iteration needs a square matrix");
    if n == 0 {
        return 0.0;
    }
    // deterministic, non-degenerate start vector
    let mut v = nalgebra::DVector::from_fn(n, |i, _| 1.0 + (i as f64 + 1.0).sqrt() * 1e-3);
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let w = a * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lambda).abs() <= rel_tol * next.abs().max(f64::MIN_POSITIVE) {
            lambda = next;
            break;
        }
        lambda = next;
    }
    // one more Rayleigh quotient at the converged vector
    v.dot(&(a * &v)).max(lambda)
}

pub fn min_eigenvalue(a: &Matrix) -> f64 {
    SymmetricEigen::new(a.clone())
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |acc, &v| acc.min(v))
}

/// Minimum-norm least-squares solution of `A X = B` via SVD, together with
/// the numerical rank of `A`.
pub fn lstsq(a: &Matrix, b: &Matrix) -> (Matrix, usize) {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0_f64, |m, &s| m.max(s));
    let tol = smax * (a.nrows().max(a.ncols()) as f64) * f64::EPSILON;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    let x = svd
        .solve(b, tol)
        .expect("SVD computed with both U and V^T");
    (x, rank)
}
