//! Schrödingerisation: a linear system `du/dt = −i A(t,θ) u` with
//! non-Hermitian `A` is dilated to Hermitian dynamics on `C^D ⊗ C^{N_ξ}`,
//! `H = A_1 ⊗ 1 + A_2 ⊗ η̂`, where `η̂ = i ∂_ξ` acts on a periodic ξ-grid.
//! The solution is recovered by projecting the ξ-register onto `ξ > 0`.
//!
//! `η̂` is diagonal in the discrete Fourier basis, so in that basis (ordered
//! mode-major) every term is block diagonal with `D × D` blocks.

use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::adjoint::{AdjointSeed, SeedComponent};
use crate::block::{BlockEigen, BlockOp};
use crate::error::{QnodeError, Result};
use crate::evolution::Dynamics;
use crate::hamiltonian::{ParametricHamiltonian, Schedule, Term};
use crate::linalg::{self, c, CMat, CVec, I, ZERO};
use crate::quantum::{DensityMatrix, HermitianObservable, StateVector};

/// `A = A_1 − i A_2` with `A_1 = (A + A†)/2`, `A_2 = i(A − A†)/2`.
pub fn hermitian_split(a: &CMat) -> Result<(CMat, CMat)> {
    if !a.is_square() {
        return Err(QnodeError::DimensionMismatch {
            expected: a.nrows(),
            found: a.ncols(),
        });
    }
    let adj = a.adjoint();
    let a1 = (a + &adj) * c(0.5, 0.0);
    let a2 = (a - &adj) * c(0.0, 0.5);
    Ok((a1, a2))
}

#[derive(Clone, Debug)]
pub struct LinearTerm {
    pub schedule: Schedule,
    pub matrix: CMat,
    pub label: String,
}

/// `A(t, θ) = Σ_k c_k(t, θ) A_k` with real schedules.
#[derive(Clone, Debug)]
pub struct LinearSystem {
    terms: Vec<LinearTerm>,
    dim: usize,
    n_params: usize,
}

impl LinearSystem {
    pub fn new(terms: Vec<LinearTerm>, n_params: usize) -> Result<Self> {
        let Some(first) = terms.first() else {
            return Err(QnodeError::InvalidModel("no terms".into()));
        };
        let dim = first.matrix.nrows();
        for term in &terms {
            if !term.matrix.is_square() || term.matrix.nrows() != dim {
                return Err(QnodeError::DimensionMismatch {
                    expected: dim,
                    found: term.matrix.nrows(),
                });
            }
            term.schedule.validate()?;
            if let Some(&i) = term.schedule.owned_indices().iter().find(|&&i| i >= n_params) {
                return Err(QnodeError::IndexOutOfRange { index: i, len: n_params });
            }
        }
        Ok(Self { terms, dim, n_params })
    }

    /// Scalar decay of the first component, `A = θ · (−i)|0⟩⟨0|` on `C^2`.
    pub fn decay() -> Self {
        let mut m = CMat::zeros(2, 2);
        m[(0, 0)] = -I;
        Self::new(
            vec![LinearTerm {
                schedule: Schedule::Constant { index: 0 },
                matrix: m,
                label: "decay".into(),
            }],
            1,
        )
        .expect("valid builtin")
    }

    pub fn terms(&self) -> &[LinearTerm] {
        &self.terms
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn is_time_independent(&self) -> bool {
        self.terms.iter().all(|t| t.schedule.is_constant())
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params {
            return Err(QnodeError::ThetaLength {
                expected: self.n_params,
                found: theta.len(),
            });
        }
        Ok(())
    }

    /// `A(t, θ)`.
    pub fn matrix(&self, t: f64, theta: &[f64]) -> Result<CMat> {
        self.check_theta(theta)?;
        let mut out = CMat::zeros(self.dim, self.dim);
        for term in &self.terms {
            out += &term.matrix * c(term.schedule.value(t, theta), 0.0);
        }
        Ok(out)
    }

    /// Classical solution `u(T)` from `u(0) = u0`. Time-independent systems
    /// use one matrix exponential; otherwise `steps` midpoint exponentials.
    pub fn solve(&self, u0: &CVec, theta: &[f64], horizon: f64, steps: usize) -> Result<CVec> {
        if u0.len() != self.dim {
            return Err(QnodeError::DimensionMismatch {
                expected: self.dim,
                found: u0.len(),
            });
        }
        if self.is_time_independent() {
            let a = self.matrix(0.0, theta)?;
            return Ok((a * c(0.0, -horizon)).exp() * u0);
        }
        let steps = steps.max(1);
        let dt = horizon / steps as f64;
        let mut u = u0.clone();
        for n in 0..steps {
            let a = self.matrix((n as f64 + 0.5) * dt, theta)?;
            u = (a * c(0.0, -dt)).exp() * u;
        }
        Ok(u)
    }
}

/// Periodic grid `ξ_j = −L + j·2L/N` with spectral `η̂ = i ∂_ξ`.
#[derive(Clone)]
pub struct XiRegister {
    n: usize,
    half_width: f64,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for XiRegister {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("XiRegister")
            .field("n", &self.n)
            .field("half_width", &self.half_width)
            .finish()
    }
}

pub const DEFAULT_XI_POINTS: usize = 512;
pub const DEFAULT_XI_HALF_WIDTH: f64 = 16.0;

impl Default for XiRegister {
    fn default() -> Self {
        Self::new(DEFAULT_XI_POINTS, DEFAULT_XI_HALF_WIDTH).expect("valid default grid")
    }
}

impl XiRegister {
    pub fn new(n: usize, half_width: f64) -> Result<Self> {
        if n < 4 || n % 2 != 0 {
            return Err(QnodeError::InvalidGrid(format!("ξ-grid needs an even size ≥ 4, got {n}")));
        }
        if !(half_width > 0.0) || !half_width.is_finite() {
            return Err(QnodeError::InvalidGrid(format!("ξ half-width must be positive, got {half_width}")));
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            n,
            half_width,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / self.n as f64
    }

    pub fn points(&self) -> Vec<f64> {
        let h = self.spacing();
        (0..self.n).map(|j| -self.half_width + j as f64 * h).collect()
    }

    /// Eigenvalue of `η̂` on Fourier mode `p` (FFT ordering). The Nyquist
    /// mode is set to zero.
    pub fn eta_eigenvalues(&self) -> Vec<f64> {
        let dk = std::f64::consts::PI / self.half_width;
        (0..self.n)
            .map(|p| {
                let f = if p < self.n / 2 {
                    p as f64
                } else if p == self.n / 2 {
                    0.0
                } else {
                    p as f64 - self.n as f64
                };
                -f * dk
            })
            .collect()
    }

    /// Indicator of `ξ_j > 0`.
    pub fn positive_mask(&self) -> Vec<bool> {
        self.points().into_iter().map(|x| x > 0.0).collect()
    }

    pub fn n_positive(&self) -> usize {
        self.positive_mask().iter().filter(|b| **b).count()
    }

    /// Dense `η̂` in the grid basis.
    pub fn eta_matrix(&self) -> CMat {
        let mut m = CMat::zeros(self.n, self.n);
        let mut col = vec![ZERO; self.n];
        let ev = self.eta_eigenvalues();
        for l in 0..self.n {
            col.iter_mut().for_each(|x| *x = ZERO);
            col[l] = c(1.0, 0.0);
            self.dft(&mut col);
            for (x, e) in col.iter_mut().zip(&ev) {
                *x *= *e;
            }
            self.idft(&mut col);
            for j in 0..self.n {
                m[(j, l)] = col[j];
            }
        }
        m
    }

    /// Dense `Π_{ξ>0}`.
    pub fn projector_matrix(&self) -> CMat {
        let mask = self.positive_mask();
        CMat::from_fn(self.n, self.n, |i, j| if i == j && mask[i] { c(1.0, 0.0) } else { ZERO })
    }

    /// Unitary DFT in place.
    fn dft(&self, buf: &mut [Complex64]) {
        self.forward.process(buf);
        let s = 1.0 / (self.n as f64).sqrt();
        buf.iter_mut().for_each(|x| *x *= s);
    }

    fn idft(&self, buf: &mut [Complex64]) {
        self.inverse.process(buf);
        let s = 1.0 / (self.n as f64).sqrt();
        buf.iter_mut().for_each(|x| *x *= s);
    }
}

/// Samples of `e^{−|ξ|}` on the grid, unit norm.
pub fn xi_initial(xi: &XiRegister) -> CVec {
    let v = CVec::from_iterator(xi.len(), xi.points().into_iter().map(|x| c((-x.abs()).exp(), 0.0)));
    let n = v.norm();
    v / c(n, 0.0)
}

/// `u0/‖u0‖ ⊗ Ξ` on `C^D ⊗ C^{N_ξ}`.
pub fn dilated_initial_state(u0: &CVec, xi: &XiRegister) -> Result<StateVector> {
    let norm = u0.norm();
    if !(norm > 0.0) {
        return Err(QnodeError::InvalidState("zero initial vector".into()));
    }
    let v = linalg::kron_vec(&(u0 / c(norm, 0.0)), &xi_initial(xi));
    Ok(StateVector::from_raw(v, vec![u0.len(), xi.len()]))
}

/// Hermitian dilation `Σ_k c_k(t,θ) (A_1k ⊗ 1 + A_2k ⊗ η̂)`.
#[derive(Debug)]
pub struct DilatedHamiltonian {
    system: LinearSystem,
    xi: XiRegister,
    dims: Vec<usize>,
    blocks: Vec<BlockOp>,
    eigen: Vec<OnceLock<BlockEigen>>,
}

/// Builds the dilated Hamiltonian of `sys` on the ξ-grid.
pub fn dilate(sys: &LinearSystem, xi: &XiRegister) -> Result<DilatedHamiltonian> {
    let ev = xi.eta_eigenvalues();
    let mut blocks = Vec::with_capacity(sys.terms.len());
    for term in &sys.terms {
        let (a1, a2) = hermitian_split(&term.matrix)?;
        blocks.push(BlockOp::from_blocks(ev.iter().map(|&e| &a1 + &a2 * c(e, 0.0)).collect()));
    }
    Ok(DilatedHamiltonian {
        dims: vec![sys.dim, xi.len()],
        eigen: blocks.iter().map(|_| OnceLock::new()).collect(),
        system: sys.clone(),
        xi: xi.clone(),
        blocks,
    })
}

impl DilatedHamiltonian {
    pub fn system(&self) -> &LinearSystem {
        &self.system
    }

    pub fn xi(&self) -> &XiRegister {
        &self.xi
    }

    /// Dense `H(t, θ)` in the grid basis.
    pub fn dense(&self, t: f64, theta: &[f64]) -> Result<CMat> {
        Ok(self.from_working_mat(&self.generator(t, theta)?.to_dense()))
    }

    /// The same model as a dense parametric Hamiltonian in the grid basis.
    pub fn to_parametric(&self) -> Result<ParametricHamiltonian> {
        let terms = self
            .system
            .terms
            .iter()
            .zip(&self.blocks)
            .map(|(t, b)| {
                Ok(Term {
                    schedule: t.schedule.clone(),
                    operator: HermitianObservable::new(self.from_working_mat(&b.to_dense()), self.dims.clone())?,
                    label: t.label.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ParametricHamiltonian::new(terms, self.system.n_params)
    }

    /// Applies `f` to the ξ-index of every system component: `v[x·N + j]`
    /// to `w[p·D + x]` or back.
    fn transform_vec(&self, v: &CVec, to_working: bool) -> CVec {
        let (d, n) = (self.dims[0], self.dims[1]);
        let mut out = CVec::zeros(d * n);
        let mut buf = vec![ZERO; n];
        for x in 0..d {
            if to_working {
                buf.copy_from_slice(&v.as_slice()[x * n..(x + 1) * n]);
                self.xi.dft(&mut buf);
                for (p, val) in buf.iter().enumerate() {
                    out[p * d + x] = *val;
                }
            } else {
                for (p, slot) in buf.iter_mut().enumerate() {
                    *slot = v[p * d + x];
                }
                self.xi.idft(&mut buf);
                out.as_mut_slice()[x * n..(x + 1) * n].copy_from_slice(&buf);
            }
        }
        out
    }

    fn transform_columns(&self, m: &CMat, to_working: bool) -> CMat {
        let mut out = CMat::zeros(m.nrows(), m.ncols());
        for j in 0..m.ncols() {
            let col = self.transform_vec(&m.column(j).into_owned(), to_working);
            out.set_column(j, &col);
        }
        out
    }
}

impl Dynamics for DilatedHamiltonian {
    fn dim(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    fn dims(&self) -> &[usize] {
        &self.dims
    }

    fn n_params(&self) -> usize {
        self.system.n_params
    }

    fn n_terms(&self) -> usize {
        self.blocks.len()
    }

    fn is_time_independent(&self) -> bool {
        self.system.is_time_independent()
    }

    fn coefficients(&self, t: f64, theta: &[f64]) -> Result<Vec<f64>> {
        self.system.check_theta(theta)?;
        Ok(self.system.terms.iter().map(|term| term.schedule.value(t, theta)).collect())
    }

    fn coefficient_grads(&self, t: f64, theta: &[f64]) -> Result<Vec<Vec<(usize, f64)>>> {
        self.system.check_theta(theta)?;
        Ok(self.system.terms.iter().map(|term| term.schedule.grad(t, theta)).collect())
    }

    fn term(&self, k: usize) -> &BlockOp {
        &self.blocks[k]
    }

    fn term_eigen(&self, k: usize) -> &BlockEigen {
        self.eigen[k].get_or_init(|| self.blocks[k].eigh())
    }

    fn to_working_vec(&self, v: &CVec) -> CVec {
        self.transform_vec(v, true)
    }

    fn from_working_vec(&self, v: &CVec) -> CVec {
        self.transform_vec(v, false)
    }

    fn to_working_mat(&self, m: &CMat) -> CMat {
        let half = self.transform_columns(m, true);
        self.transform_columns(&half.adjoint(), true).adjoint()
    }

    fn from_working_mat(&self, m: &CMat) -> CMat {
        let half = self.transform_columns(m, false);
        self.transform_columns(&half.adjoint(), false).adjoint()
    }
}

/// Projection weight below which recovery fails.
pub const MIN_PROJECTION_WEIGHT: f64 = 1e-12;

/// `ρ = tr_ξ((1 ⊗ Π_{ξ>0}) |v⟩⟨v|) / w` and the weight `w`.
pub fn recover(v: &StateVector, xi: &XiRegister) -> Result<(DensityMatrix, f64)> {
    let n = xi.len();
    if v.dim() % n != 0 {
        return Err(QnodeError::DimensionMismatch {
            expected: n,
            found: v.dim(),
        });
    }
    let d = v.dim() / n;
    let mask = xi.positive_mask();
    let amps = v.amplitudes();
    let mut m = CMat::zeros(d, d);
    for x in 0..d {
        for y in 0..d {
            let mut acc = ZERO;
            for j in (0..n).filter(|&j| mask[j]) {
                acc += amps[x * n + j] * amps[y * n + j].conj();
            }
            m[(x, y)] = acc;
        }
    }
    let weight = linalg::trace(&m).re;
    if weight < MIN_PROJECTION_WEIGHT {
        return Err(QnodeError::ProjectionVanishes(weight));
    }
    Ok((DensityMatrix::from_raw(m / c(weight, 0.0), vec![d]), weight))
}

/// Collocation datum: a positive semidefinite system observable and the
/// normalised value `tr(O σ(T)) / tr(σ(T))`.
#[derive(Clone, Debug)]
pub struct CollocationRecord {
    pub observable: CMat,
    pub value: f64,
}

/// `(1/N) Σ_j |ū_j − tr(O_j ρ(T,θ))|²` with `ρ(T,θ)` recovered from `v_T`,
/// and the seed of its exact derivative with respect to `|v_T⟩⟨v_T|`:
/// per record, `−(2/(N w)) (ū_j − p_j) (O_j ⊗ Π − p_j 1 ⊗ Π)` split into its
/// two positive semidefinite pieces.
pub fn ode_loss_and_seed(
    records: &[CollocationRecord],
    v_t: &StateVector,
    xi: &XiRegister,
) -> Result<(f64, AdjointSeed)> {
    if records.is_empty() {
        return Err(QnodeError::InvalidConfig("no collocation records".into()));
    }
    let (rho, weight) = recover(v_t, xi)?;
    let d = rho.dim();
    let n_rec = records.len() as f64;
    let proj = xi.projector_matrix();
    let n_pos = xi.n_positive() as f64;
    let dims = vec![d, xi.len()];
    let identity_piece = DensityMatrix::from_raw(
        linalg::kron(&linalg::identity(d), &proj) * c(1.0 / (d as f64 * n_pos), 0.0),
        dims.clone(),
    );
    let mut loss = 0.0;
    let mut components = Vec::with_capacity(2 * records.len());
    for rec in records {
        if rec.observable.nrows() != d {
            return Err(QnodeError::DimensionMismatch {
                expected: d,
                found: rec.observable.nrows(),
            });
        }
        let (values, _) = linalg::eigh(&rec.observable);
        let tr_o = linalg::trace(&rec.observable).re;
        if values.iter().any(|v| *v < -1e-12) || tr_o <= 0.0 {
            return Err(QnodeError::InvalidConfig("collocation observables must be PSD and nonzero".into()));
        }
        let predicted = linalg::trace_product(&rec.observable, rho.matrix()).re;
        let residual = rec.value - predicted;
        loss += residual * residual / n_rec;
        let prefactor = -2.0 * residual / (n_rec * weight);
        let scale = tr_o * n_pos;
        components.push(SeedComponent {
            coeff: prefactor,
            scale,
            state: DensityMatrix::from_raw(linalg::kron(&rec.observable, &proj) * c(1.0 / scale, 0.0), dims.clone()).into(),
        });
        components.push(SeedComponent {
            coeff: -prefactor * predicted,
            scale: d as f64 * n_pos,
            state: identity_piece.clone().into(),
        });
    }
    Ok((loss, AdjointSeed::new(components)?))
}

/// Noiseless collocation values `tr(O_j u u†)/‖u‖²` of a classical solution.
pub fn collocation_values(u: &CVec, observables: &[CMat]) -> Vec<f64> {
    let norm2 = u.norm_squared();
    observables.iter().map(|o| u.dotc(&(o * u)).re / norm2).collect()
}

/// Computational-basis projectors `|x⟩⟨x|` on `C^D`.
pub fn basis_projectors(d: usize) -> Vec<CMat> {
    (0..d)
        .map(|x| CMat::from_fn(d, d, |i, j| if i == x && j == x { c(1.0, 0.0) } else { ZERO }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::{circuit_gradient, GradientOptions, ShotBudget, TimeGrid};
    use crate::evolution::{evolve_state, PropagatorConfig};
    use crate::quantum::QuantumState;
    use crate::sampling;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(d: usize, rng: &mut ChaCha8Rng) -> CMat {
        CMat::from_fn(d, d, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    fn evolve_dilated(h: &DilatedHamiltonian, theta: &[f64], v0: &StateVector, t: f64) -> StateVector {
        match evolve_state(&v0.clone().into(), h, theta, 0.0, t, &PropagatorConfig::exact(t)).unwrap() {
            QuantumState::Pure(v) => v,
            QuantumState::Mixed(_) => unreachable!(),
        }
    }

    #[test]
    fn split_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let herm = sampling::random_hermitian(&[3], &mut rng).matrix().clone();
        let (a1, a2) = hermitian_split(&herm).unwrap();
        assert!(linalg::max_abs_diff(&a1, &herm) < 1e-15 && a2.norm() < 1e-15);
        let decay = CMat::from_element(1, 1, c(0.0, -0.7));
        let (a1, a2) = hermitian_split(&decay).unwrap();
        assert!(a1.norm() < 1e-15 && (a2[(0, 0)] - c(0.7, 0.0)).norm() < 1e-15);
        let a = random_matrix(4, &mut rng);
        let (a1, a2) = hermitian_split(&a).unwrap();
        assert!(linalg::max_abs_diff(&a, &(&a1 - &a2 * I)) < 1e-12);
        assert!(linalg::hermiticity_defect(&a1) < 1e-15 && linalg::hermiticity_defect(&a2) < 1e-15);
        assert!(hermitian_split(&CMat::zeros(2, 3)).is_err());
    }

    #[test]
    fn eta_is_hermitian_and_differentiates() {
        let xi = XiRegister::new(128, 8.0).unwrap();
        let eta = xi.eta_matrix();
        assert!(linalg::hermiticity_defect(&eta) < 1e-9);
        let pts = xi.points();
        let f = CVec::from_iterator(128, pts.iter().map(|x| c((-x * x).exp(), 0.0)));
        let df = &eta * &f;
        for (j, x) in pts.iter().enumerate() {
            // i d/dξ of a Gaussian
            let exact = c(0.0, -2.0 * x * (-x * x).exp());
            assert!((df[j] - exact).norm() < 1e-9, "{j}");
        }
        let p = xi.projector_matrix();
        assert!(linalg::max_abs_diff(&(&p * &p), &p) < 1e-15);
    }

    #[test]
    fn xi_initial_examples() {
        let xi = XiRegister::default();
        let v = xi_initial(&xi);
        assert!((v.norm() - 1.0).abs() < 1e-12);
        for j in 1..xi.len() {
            assert!((v[j] - v[xi.len() - j]).norm() < 1e-15);
        }
        let peak = (0..xi.len()).max_by(|&a, &b| v[a].re.total_cmp(&v[b].re)).unwrap();
        assert_eq!(xi.points()[peak], 0.0);
    }

    #[test]
    fn dilation_examples() {
        let xi = XiRegister::new(16, 4.0).unwrap();
        let h = dilate(&LinearSystem::decay(), &xi).unwrap();
        let dense = h.dense(0.0, &[0.7]).unwrap();
        let mut p0 = CMat::zeros(2, 2);
        p0[(0, 0)] = c(0.7, 0.0);
        assert!(linalg::max_abs_diff(&dense, &linalg::kron(&p0, &xi.eta_matrix())) < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let herm = sampling::random_hermitian(&[2], &mut rng).matrix().clone();
        let sys = LinearSystem::new(
            vec![LinearTerm {
                schedule: Schedule::Constant { index: 0 },
                matrix: herm.clone(),
                label: "h".into(),
            }],
            1,
        )
        .unwrap();
        let dense = dilate(&sys, &xi).unwrap().dense(0.0, &[1.3]).unwrap();
        let expected = linalg::kron(&(herm * c(1.3, 0.0)), &linalg::identity(16));
        assert!(linalg::max_abs_diff(&dense, &expected) < 1e-12);
    }

    #[test]
    fn dilation_matches_both_constructions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xi = XiRegister::new(8, 3.0).unwrap();
        let eta = xi.eta_matrix();
        let id = linalg::identity(8);
        let a = random_matrix(2, &mut rng);
        let b = random_matrix(2, &mut rng);
        let sys = LinearSystem::new(
            vec![
                LinearTerm {
                    schedule: Schedule::Constant { index: 0 },
                    matrix: a.clone(),
                    label: "a".into(),
                },
                LinearTerm {
                    schedule: Schedule::Fourier {
                        omega: 2.0,
                        cos_indices: vec![1],
                        sin_indices: vec![],
                    },
                    matrix: b.clone(),
                    label: "b".into(),
                },
            ],
            2,
        )
        .unwrap();
        let h = dilate(&sys, &xi).unwrap();
        let theta = [0.4, -1.1];
        let t = 0.3;
        let dense = h.dense(t, &theta).unwrap();
        assert!(linalg::hermiticity_defect(&dense) < 1e-10);
        // split of the summed matrix
        let sum = sys.matrix(t, &theta).unwrap();
        let (a1, a2) = hermitian_split(&sum).unwrap();
        let from_split = linalg::kron(&a2, &eta) + linalg::kron(&a1, &id);
        assert!(linalg::max_abs_diff(&dense, &from_split) < 1e-10);
        // ½Σ c_k(A_k⊗1 + iA_k⊗η̂) + ½Σ c_k(A_k†⊗1 − iA_k†⊗η̂)
        let coeffs = h.coefficients(t, &theta).unwrap();
        let mut expanded = CMat::zeros(16, 16);
        for (ck, m) in coeffs.iter().zip([&a, &b]) {
            let adj = m.adjoint();
            expanded += (linalg::kron(m, &id) + linalg::kron(m, &eta) * I) * c(0.5 * ck, 0.0);
            expanded += (linalg::kron(&adj, &id) - linalg::kron(&adj, &eta) * I) * c(0.5 * ck, 0.0);
        }
        assert!(linalg::max_abs_diff(&dense, &expanded) < 1e-10);
    }

    #[test]
    fn working_basis_round_trips() {
        let xi = XiRegister::new(8, 2.0).unwrap();
        let h = dilate(&LinearSystem::decay(), &xi).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = sampling::random_pure(&[16], &mut rng).into_amplitudes();
        assert!((h.from_working_vec(&h.to_working_vec(&v)) - &v).norm() < 1e-12);
        let m = sampling::random_density(&[16], &mut rng).into_matrix();
        assert!(linalg::max_abs_diff(&h.from_working_mat(&h.to_working_mat(&m)), &m) < 1e-12);
        assert!((h.to_working_vec(&v).norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dilated_evolution_preserves_norm() {
        let xi = XiRegister::default();
        let h = dilate(&LinearSystem::decay(), &xi).unwrap();
        let u0 = CVec::from_vec(vec![c(1.0, 0.0), c(1.0, 0.0)]);
        let v0 = dilated_initial_state(&u0, &xi).unwrap();
        let v = evolve_dilated(&h, &[0.7], &v0, 2.0);
        assert!((v.amplitudes().norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn decay_rate_is_recovered() {
        let xi = XiRegister::default();
        let sys = LinearSystem::new(
            vec![LinearTerm {
                schedule: Schedule::Constant { index: 0 },
                matrix: CMat::from_element(1, 1, -I),
                label: "decay".into(),
            }],
            1,
        )
        .unwrap();
        let h = dilate(&sys, &xi).unwrap();
        let v0 = dilated_initial_state(&CVec::from_element(1, c(1.0, 0.0)), &xi).unwrap();
        let (_, w0) = recover(&v0, &xi).unwrap();
        for t in [0.5, 1.0, 2.0] {
            let v = evolve_dilated(&h, &[0.7], &v0, t);
            let (rho, w) = recover(&v, &xi).unwrap();
            assert!((rho.matrix()[(0, 0)] - c(1.0, 0.0)).norm() < 1e-12);
            let ratio = (w / w0).sqrt();
            let classical = sys.solve(&CVec::from_element(1, c(1.0, 0.0)), &[0.7], t, 1).unwrap()[0].norm();
            assert!((ratio - classical).abs() < 1e-3, "T = {t}: {ratio} vs {classical}");
        }
    }

    #[test]
    fn coarser_grids_are_less_accurate() {
        let sys = LinearSystem::new(
            vec![LinearTerm {
                schedule: Schedule::Constant { index: 0 },
                matrix: CMat::from_element(1, 1, -I),
                label: "decay".into(),
            }],
            1,
        )
        .unwrap();
        let mut errors = Vec::new();
        for n in [64, 128, 256, 512] {
            let xi = XiRegister::new(n, 16.0).unwrap();
            let h = dilate(&sys, &xi).unwrap();
            let v0 = dilated_initial_state(&CVec::from_element(1, c(1.0, 0.0)), &xi).unwrap();
            let (_, w0) = recover(&v0, &xi).unwrap();
            let (_, w) = recover(&evolve_dilated(&h, &[0.7], &v0, 1.0), &xi).unwrap();
            errors.push(((w / w0).sqrt() - (-0.7f64).exp()).abs());
        }
        assert!(errors.windows(2).all(|e| e[1] < e[0]), "{errors:?}");
    }

    #[test]
    fn hermitian_systems_recover_direct_evolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let herm = sampling::random_hermitian(&[2], &mut rng).matrix().clone();
        let sys = LinearSystem::new(
            vec![LinearTerm {
                schedule: Schedule::Constant { index: 0 },
                matrix: herm.clone(),
                label: "h".into(),
            }],
            1,
        )
        .unwrap();
        let xi = XiRegister::default();
        let h = dilate(&sys, &xi).unwrap();
        let u0 = sampling::random_pure(&[2], &mut rng).into_amplitudes();
        let v = evolve_dilated(&h, &[0.9], &dilated_initial_state(&u0, &xi).unwrap(), 1.5);
        let (rho, _) = recover(&v, &xi).unwrap();
        let u = linalg::expm_hermitian(&(herm * c(0.9, 0.0)), 1.5) * &u0;
        assert!(linalg::max_abs_diff(rho.matrix(), &linalg::outer(&u, &u)) < 1e-6);
    }

    #[test]
    fn negative_support_cannot_be_recovered() {
        let xi = XiRegister::new(8, 2.0).unwrap();
        let mask = xi.positive_mask();
        let amps = CVec::from_iterator(8, mask.iter().map(|&p| if p { ZERO } else { c(0.2f64.sqrt(), 0.0) }));
        let v = StateVector::new(amps, vec![8]).unwrap();
        assert!(matches!(recover(&v, &xi), Err(QnodeError::ProjectionVanishes(_))));
    }

    fn decay_problem(xi: &XiRegister, t: f64) -> (DilatedHamiltonian, StateVector, Vec<CollocationRecord>) {
        let sys = LinearSystem::decay();
        let u0 = CVec::from_vec(vec![c(1.0, 0.0), c(1.0, 0.0)]);
        let u_t = sys.solve(&u0, &[0.7], t, 1).unwrap();
        let obs = basis_projectors(2);
        let records = obs
            .iter()
            .zip(collocation_values(&u_t, &obs))
            .map(|(o, value)| CollocationRecord {
                observable: o.clone(),
                value,
            })
            .collect();
        (dilate(&sys, xi).unwrap(), dilated_initial_state(&u0, xi).unwrap(), records)
    }

    #[test]
    fn ode_seed_reconstructs_the_derivative() {
        let xi = XiRegister::new(16, 4.0).unwrap();
        let (h, v0, records) = decay_problem(&xi, 1.0);
        let v = evolve_dilated(&h, &[0.3], &v0, 1.0);
        let (_, seed) = ode_loss_and_seed(&records, &v, &xi).unwrap();
        let (rho, w) = recover(&v, &xi).unwrap();
        let proj = xi.projector_matrix();
        let mut expected = CMat::zeros(32, 32);
        for rec in &records {
            let p = linalg::trace_product(&rec.observable, rho.matrix()).re;
            let piece = linalg::kron(&rec.observable, &proj) - linalg::kron(&linalg::identity(2), &proj) * c(p, 0.0);
            expected += piece * c(-2.0 * (rec.value - p) / (2.0 * w), 0.0);
        }
        assert!(linalg::max_abs_diff(&seed.operator(), &expected) < 1e-10);
    }

    #[test]
    fn ode_loss_vanishes_at_the_data() {
        let xi = XiRegister::default();
        let (h, v0, records) = decay_problem(&xi, 1.0);
        let v = evolve_dilated(&h, &[0.7], &v0, 1.0);
        let (loss, seed) = ode_loss_and_seed(&records, &v, &xi).unwrap();
        assert!(loss < 1e-6, "{loss}");
        // consistent data built from the model's own prediction
        let (rho, _) = recover(&v, &xi).unwrap();
        let exact: Vec<CollocationRecord> = records
            .iter()
            .map(|r| CollocationRecord {
                observable: r.observable.clone(),
                value: linalg::trace_product(&r.observable, rho.matrix()).re,
            })
            .collect();
        let (loss, seed_exact) = ode_loss_and_seed(&exact, &v, &xi).unwrap();
        assert!(loss < 1e-28);
        assert!(seed_exact.components().iter().all(|c| c.coeff.abs() < 1e-12));
        assert_eq!(seed.components().len(), 4);
    }

    #[test]
    fn ode_gradient_matches_finite_differences() {
        let xi = XiRegister::new(128, 12.0).unwrap();
        let t = 1.0;
        let (h, v0, records) = decay_problem(&xi, t);
        let loss = |a: f64| {
            let v = evolve_dilated(&h, &[a], &v0, t);
            ode_loss_and_seed(&records, &v, &xi).unwrap().0
        };
        let theta = [0.4];
        let v = evolve_dilated(&h, &theta, &v0, t);
        let (_, seed) = ode_loss_and_seed(&records, &v, &xi).unwrap();
        let grid = TimeGrid::trapezoid(t, 200).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = circuit_gradient(&h, &theta, &v0.clone().into(), &seed, &grid, ShotBudget::Exact, &mut rng, &GradientOptions::exact(t))
            .unwrap();
        let fd = (loss(0.4 + 1e-5) - loss(0.4 - 1e-5)) / 2e-5;
        assert!((g.values[0] - fd).abs() < 1e-4, "{} vs {fd}", g.values[0]);
        assert!(fd.abs() > 1e-3);
    }
}
