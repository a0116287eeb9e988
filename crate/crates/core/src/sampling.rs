//! Random instances for tests, gradient checks and scaling studies.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::{c, CMat, CVec};
use crate::quantum::{DensityMatrix, HermitianObservable, StateVector};

fn gaussian_complex<R: Rng + ?Sized>(rng: &mut R) -> num_complex::Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    c(re, im)
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMat {
    CMat::from_fn(rows, cols, |_, _| gaussian_complex(rng))
}

/// Haar-random pure state.
pub fn random_pure<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> StateVector {
    let d: usize = dims.iter().product();
    let v = CVec::from_fn(d, |_, _| gaussian_complex(rng));
    StateVector::normalized(v, dims.to_vec()).expect("gaussian vector is nonzero")
}

/// Full-rank random density matrix `G G† / tr(G G†)`.
pub fn random_density<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> DensityMatrix {
    let d: usize = dims.iter().product();
    let g = gaussian_matrix(d, d, rng);
    let mut m = &g * g.adjoint();
    let tr = crate::linalg::trace(&m).re;
    m /= c(tr, 0.0);
    // restore exact Hermiticity lost to rounding
    let m = (&m + m.adjoint()) * c(0.5, 0.0);
    DensityMatrix::new(m, dims.to_vec()).expect("valid random density")
}

/// Random Hermitian matrix with entries of unit scale.
pub fn random_hermitian<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> HermitianObservable {
    let d: usize = dims.iter().product();
    let g = gaussian_matrix(d, d, rng);
    let h = (&g + g.adjoint()) * c(0.5, 0.0);
    HermitianObservable::new(h, dims.to_vec()).expect("hermitian by construction")
}
