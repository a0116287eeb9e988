//! Dense complex helpers shared by every module.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type CMat = DMatrix<Complex64>;
pub type CVec = DVector<Complex64>;

pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const ONE: Complex64 = Complex64::new(1.0, 0.0);
pub const I: Complex64 = Complex64::new(0.0, 1.0);

pub fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

pub fn kron_vec(a: &CVec, b: &CVec) -> CVec {
    let mut out = CVec::zeros(a.len() * b.len());
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i * b.len() + j] = x * y;
        }
    }
    out
}

/// Largest entry-wise modulus of `a - b`.
pub fn max_abs_diff(a: &CMat, b: &CMat) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).norm())
        .fold(0.0, f64::max)
}

pub fn hermiticity_defect(m: &CMat) -> f64 {
    if !m.is_square() {
        return f64::INFINITY;
    }
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in i..n {
            worst = worst.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    worst
}

pub fn trace(m: &CMat) -> Complex64 {
    m.diagonal().iter().sum()
}

/// `tr(a b)` without forming the product.
pub fn trace_product(a: &CMat, b: &CMat) -> Complex64 {
    let n = a.nrows();
    let mut acc = ZERO;
    for i in 0..n {
        for k in 0..n {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

/// Eigendecomposition of a Hermitian matrix: real eigenvalues and unitary
/// eigenvector columns.
pub fn eigh(m: &CMat) -> (DVector<f64>, CMat) {
    let hermitian = (m + m.adjoint()) * c(0.5, 0.0);
    let eig = hermitian.symmetric_eigen();
    (eig.eigenvalues, eig.eigenvectors)
}

/// Rebuild `V diag(f(λ)) V†`.
pub fn spectral_map(values: &DVector<f64>, vectors: &CMat, f: impl Fn(f64) -> Complex64) -> CMat {
    let n = vectors.nrows();
    let mut scaled = vectors.clone();
    for (j, &lam) in values.iter().enumerate() {
        let w = f(lam);
        for i in 0..n {
            scaled[(i, j)] *= w;
        }
    }
    scaled * vectors.adjoint()
}

/// `exp(-i h t)` for Hermitian `h`.
pub fn expm_hermitian(h: &CMat, t: f64) -> CMat {
    let (vals, vecs) = eigh(h);
    spectral_map(&vals, &vecs, |lam| Complex64::from_polar(1.0, -lam * t))
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

/// `‖U†U − 1‖_max`.
pub fn unitarity_defect(u: &CMat) -> f64 {
    let prod = u.adjoint() * u;
    max_abs_diff(&prod, &identity(u.nrows()))
}

pub fn operator_norm_hermitian(m: &CMat) -> f64 {
    let (vals, _) = eigh(m);
    vals.iter().fold(0.0f64, |acc, v| acc.max(v.abs()))
}

pub fn inner(a: &CVec, b: &CVec) -> Complex64 {
    a.dotc(b)
}

pub fn outer(a: &CVec, b: &CVec) -> CMat {
    a * b.adjoint()
}

pub fn pauli_x() -> CMat {
    CMat::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO])
}

pub fn pauli_y() -> CMat {
    CMat::from_row_slice(2, 2, &[ZERO, -I, I, ZERO])
}

pub fn pauli_z() -> CMat {
    CMat::from_row_slice(2, 2, &[ONE, ZERO, ZERO, -ONE])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expm_of_pauli_z() {
        let t = 0.37;
        let u = expm_hermitian(&(pauli_z() * c(1.3, 0.0)), t);
        assert!((u[(0, 0)] - Complex64::from_polar(1.0, -1.3 * t)).norm() < 1e-14);
        assert!((u[(1, 1)] - Complex64::from_polar(1.0, 1.3 * t)).norm() < 1e-14);
        assert!(u[(0, 1)].norm() < 1e-14);
    }

    #[test]
    fn trace_product_matches_matmul() {
        let a = pauli_x() + pauli_z() * c(0.3, 0.0);
        let b = pauli_y() * c(0.0, 2.0) + pauli_x();
        assert!((trace_product(&a, &b) - trace(&(&a * &b))).norm() < 1e-14);
    }

    #[test]
    fn kron_vec_matches_matrix_kron() {
        let a = CVec::from_vec(vec![c(1.0, 0.5), c(-0.2, 0.0)]);
        let b = CVec::from_vec(vec![c(0.0, 1.0), c(2.0, 0.0), c(0.1, 0.1)]);
        let ma = CMat::from_column_slice(2, 1, a.as_slice());
        let mb = CMat::from_column_slice(3, 1, b.as_slice());
        let k = kron(&ma, &mb);
        let v = kron_vec(&a, &b);
        for i in 0..6 {
            assert_eq!(k[(i, 0)], v[i]);
        }
    }
}
