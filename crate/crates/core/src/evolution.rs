//! Time-ordered propagators `U(s0, s1)` for parametric Hamiltonians.
//!
//! Everything here is generic over [`Dynamics`], which exposes the
//! Hamiltonian as block-diagonal term operators in some working basis.
//! Dense models use a single block in the computational basis.

use serde::{Deserialize, Serialize};

use crate::block::{BlockEigen, BlockOp};
use crate::error::{QnodeError, Result};
use crate::hamiltonian::ParametricHamiltonian;
use crate::linalg::{CMat, CVec};
use crate::quantum::{DensityMatrix, QuantumState, StateVector};

/// A Hamiltonian `Σ_k f_k(t, θ) H_k` whose terms are block-diagonal in a
/// fixed working basis.
pub trait Dynamics: Sync {
    fn dim(&self) -> usize;
    fn dims(&self) -> &[usize];
    fn n_params(&self) -> usize;
    fn n_terms(&self) -> usize;
    fn is_time_independent(&self) -> bool;
    fn coefficients(&self, t: f64, theta: &[f64]) -> Result<Vec<f64>>;
    /// Per term, the sparse list of `(m, ∂f_k/∂θ_m)`.
    fn coefficient_grads(&self, t: f64, theta: &[f64]) -> Result<Vec<Vec<(usize, f64)>>>;
    /// `H_k` in the working basis.
    fn term(&self, k: usize) -> &BlockOp;
    fn term_eigen(&self, k: usize) -> &BlockEigen;

    fn to_working_vec(&self, v: &CVec) -> CVec {
        v.clone()
    }
    fn from_working_vec(&self, v: &CVec) -> CVec {
        v.clone()
    }
    /// `W m W†` for the basis change `W` into the working basis.
    fn to_working_mat(&self, m: &CMat) -> CMat {
        m.clone()
    }
    fn from_working_mat(&self, m: &CMat) -> CMat {
        m.clone()
    }

    /// `H(t, θ)` in the working basis.
    fn generator(&self, t: f64, theta: &[f64]) -> Result<BlockOp> {
        let coeffs = self.coefficients(t, theta)?;
        let first = self.term(0);
        let mut h = BlockOp::zeros(first.block_size(), first.blocks().len());
        for (k, f) in coeffs.iter().enumerate() {
            if *f != 0.0 {
                h.axpy(*f, self.term(k));
            }
        }
        Ok(h)
    }
}

impl Dynamics for ParametricHamiltonian {
    fn dim(&self) -> usize {
        ParametricHamiltonian::dim(self)
    }
    fn dims(&self) -> &[usize] {
        ParametricHamiltonian::dims(self)
    }
    fn n_params(&self) -> usize {
        ParametricHamiltonian::n_params(self)
    }
    fn n_terms(&self) -> usize {
        ParametricHamiltonian::n_terms(self)
    }
    fn is_time_independent(&self) -> bool {
        ParametricHamiltonian::is_time_independent(self)
    }
    fn coefficients(&self, t: f64, theta: &[f64]) -> Result<Vec<f64>> {
        ParametricHamiltonian::coefficients(self, t, theta)
    }
    fn coefficient_grads(&self, t: f64, theta: &[f64]) -> Result<Vec<Vec<(usize, f64)>>> {
        self.schedule_grads(t, theta)
    }
    fn term(&self, k: usize) -> &BlockOp {
        self.term_block(k)
    }
    fn term_eigen(&self, k: usize) -> &BlockEigen {
        ParametricHamiltonian::term_eigen(self, k)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Fourth-order commutator-free Magnus steps; a single exponential when
    /// the Hamiltonian is time independent.
    ExactSubstep,
    /// First-order product of per-term exponentials at each substep
    /// midpoint, in declaration order.
    Trotter1,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepRule {
    /// Substeps no longer than this.
    MaxStep(f64),
    /// Fixed substep count for every call.
    Substeps(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PropagatorConfig {
    pub method: Method,
    pub step: StepRule,
}

impl PropagatorConfig {
    pub fn new(method: Method, step: StepRule) -> Result<Self> {
        let cfg = Self { method, step };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Default step for a horizon `T`: `T/100` for both methods.
    pub fn for_horizon(method: Method, horizon: f64) -> Self {
        Self {
            method,
            step: StepRule::MaxStep(horizon.abs().max(1e-12) * 1e-2),
        }
    }

    pub fn exact(horizon: f64) -> Self {
        Self::for_horizon(Method::ExactSubstep, horizon)
    }

    pub fn validate(&self) -> Result<()> {
        match self.step {
            StepRule::MaxStep(dt) if !(dt > 0.0) || !dt.is_finite() => Err(
                QnodeError::InvalidConfig(format!("substep length must be positive, got {dt}")),
            ),
            StepRule::Substeps(0) => Err(QnodeError::InvalidConfig(
                "substep count must be at least 1".into(),
            )),
            _ => Ok(()),
        }
    }

    fn substeps(&self, span: f64) -> usize {
        match self.step {
            StepRule::MaxStep(dt) => ((span / dt) - 1e-9).ceil().max(1.0) as usize,
            StepRule::Substeps(n) => n,
        }
    }
}

const SQRT3: f64 = 1.732_050_807_568_877_2;

/// `U(s0, s1)` in the working basis of `h`.
pub fn segment<D: Dynamics + ?Sized>(
    h: &D,
    theta: &[f64],
    s0: f64,
    s1: f64,
    cfg: &PropagatorConfig,
) -> Result<BlockOp> {
    cfg.validate()?;
    if !s0.is_finite() || !s1.is_finite() {
        return Err(QnodeError::InvalidConfig("non-finite time bound".into()));
    }
    if theta.len() != h.n_params() {
        return Err(QnodeError::ThetaLength {
            expected: h.n_params(),
            found: theta.len(),
        });
    }
    if s1 < s0 {
        return Ok(segment(h, theta, s1, s0, cfg)?.adjoint());
    }
    let span = s1 - s0;
    let first = h.term(0);
    if span == 0.0 {
        return Ok(BlockOp::identity(first.block_size(), first.blocks().len()));
    }
    match cfg.method {
        Method::ExactSubstep if h.is_time_independent() => {
            Ok(h.generator(s0, theta)?.expm_hermitian(span))
        }
        Method::ExactSubstep => {
            let n = cfg.substeps(span);
            let dt = span / n as f64;
            let (a1, a2) = ((3.0 - 2.0 * SQRT3) / 12.0, (3.0 + 2.0 * SQRT3) / 12.0);
            let (c1, c2) = (0.5 - SQRT3 / 6.0, 0.5 + SQRT3 / 6.0);
            let mut u: Option<BlockOp> = None;
            for i in 0..n {
                let t = s0 + i as f64 * dt;
                let h1 = h.generator(t + c1 * dt, theta)?;
                let h2 = h.generator(t + c2 * dt, theta)?;
                let mut early = h1.clone();
                early.scale(a2);
                early.axpy(a1, &h2);
                let mut late = h1;
                late.scale(a1);
                late.axpy(a2, &h2);
                let step = late.expm_hermitian(dt).compose(&early.expm_hermitian(dt));
                u = Some(match u {
                    None => step,
                    Some(prev) => step.compose(&prev),
                });
            }
            Ok(u.expect("at least one substep"))
        }
        Method::Trotter1 => {
            let n = cfg.substeps(span);
            let dt = span / n as f64;
            let mut u: Option<BlockOp> = None;
            for i in 0..n {
                let mid = s0 + (i as f64 + 0.5) * dt;
                let coeffs = h.coefficients(mid, theta)?;
                for (k, f) in coeffs.iter().enumerate() {
                    if *f == 0.0 {
                        continue;
                    }
                    let factor = h.term_eigen(k).exp(f * dt);
                    u = Some(match u {
                        None => factor,
                        Some(prev) => factor.compose(&prev),
                    });
                }
            }
            Ok(u.unwrap_or_else(|| BlockOp::identity(first.block_size(), first.blocks().len())))
        }
    }
}

/// Dense `U(s0, s1)`; for `s1 < s0` this is the adjoint of the forward
/// propagator.
pub fn propagator(
    h: &ParametricHamiltonian,
    theta: &[f64],
    s0: f64,
    s1: f64,
    cfg: &PropagatorConfig,
) -> Result<CMat> {
    Ok(segment(h, theta, s0, s1, cfg)?.to_dense())
}

/// Applies `U(s0, s1)` to a state given in the computational basis.
pub fn evolve_state<D: Dynamics + ?Sized>(
    state: &QuantumState,
    h: &D,
    theta: &[f64],
    s0: f64,
    s1: f64,
    cfg: &PropagatorConfig,
) -> Result<QuantumState> {
    if state.dim() != h.dim() {
        return Err(QnodeError::DimensionMismatch {
            expected: h.dim(),
            found: state.dim(),
        });
    }
    let u = segment(h, theta, s0, s1, cfg)?;
    Ok(apply_unitary(&u, h, state))
}

/// `U ψ` or `U ρ U†` for a working-basis unitary `u`.
pub fn apply_unitary<D: Dynamics + ?Sized>(u: &BlockOp, h: &D, state: &QuantumState) -> QuantumState {
    match state {
        QuantumState::Pure(s) => {
            let v = h.from_working_vec(&u.mul_vec(&h.to_working_vec(s.amplitudes())));
            QuantumState::Pure(StateVector::from_raw(v, s.dims().to_vec()))
        }
        QuantumState::Mixed(r) => {
            let m = h.from_working_mat(&u.conjugate(&h.to_working_mat(r.matrix())));
            QuantumState::Mixed(DensityMatrix::from_raw(m, r.dims().to_vec()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::{builtin_hydrogen, builtin_td_ising, single_qubit_ansatz, Schedule};
    use crate::linalg::{self, c};
    use crate::quantum::PauliString;
    use crate::sampling;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn z_model(omega: f64) -> (ParametricHamiltonian, Vec<f64>) {
        let h = ParametricHamiltonian::from_paulis(
            vec![("Z".parse::<PauliString>().unwrap(), Schedule::Constant { index: 0 })],
            1,
        )
        .unwrap();
        (h, vec![omega])
    }

    fn td_model(seed: u64) -> (ParametricHamiltonian, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = builtin_td_ising(2, 2, &mut rng).unwrap();
        (m.target, m.target_theta)
    }

    #[test]
    fn constant_z_matches_analytic_exponential() {
        let (h, theta) = z_model(1.3);
        let u = propagator(&h, &theta, 0.0, 0.8, &PropagatorConfig::exact(1.0)).unwrap();
        assert!((u[(0, 0)] - num_complex::Complex64::from_polar(1.0, -1.3 * 0.8)).norm() < 1e-12);
        assert!((u[(1, 1)] - num_complex::Complex64::from_polar(1.0, 1.3 * 0.8)).norm() < 1e-12);
        assert!(u[(0, 1)].norm() < 1e-15);
    }

    #[test]
    fn time_independent_exact_matches_matrix_exponential() {
        let model = builtin_hydrogen();
        let u = propagator(
            &model.target,
            &model.target_theta,
            0.2,
            1.7,
            &PropagatorConfig::exact(2.0),
        )
        .unwrap();
        let hm = model.target.evaluate(0.0, &model.target_theta).unwrap();
        let reference = linalg::expm_hermitian(hm.matrix(), 1.5);
        assert!(linalg::max_abs_diff(&u, &reference) < 1e-10);
    }

    #[test]
    fn group_property_holds() {
        let (h, theta) = td_model(1);
        let cfg = PropagatorConfig::exact(2.0);
        let full = propagator(&h, &theta, 0.0, 1.3, &cfg).unwrap();
        let a = propagator(&h, &theta, 0.0, 0.6, &cfg).unwrap();
        let b = propagator(&h, &theta, 0.6, 1.3, &cfg).unwrap();
        assert!(linalg::max_abs_diff(&full, &(b * a)) < 1e-9);
    }

    #[test]
    fn backward_bounds_give_the_adjoint() {
        let (h, theta) = td_model(2);
        let cfg = PropagatorConfig::exact(2.0);
        let fwd = propagator(&h, &theta, 0.1, 0.9, &cfg).unwrap();
        let bwd = propagator(&h, &theta, 0.9, 0.1, &cfg).unwrap();
        assert!(linalg::max_abs_diff(&bwd, &fwd.adjoint()) < 1e-14);
    }

    #[test]
    fn maximally_mixed_state_is_stationary() {
        let (h, theta) = td_model(3);
        let rho = QuantumState::Mixed(DensityMatrix::maximally_mixed(vec![2, 2]));
        let out = evolve_state(&rho, &h, &theta, 0.0, 1.0, &PropagatorConfig::exact(1.0)).unwrap();
        assert!(linalg::max_abs_diff(out.to_density().matrix(), rho.to_density().matrix()) < 1e-12);
    }

    #[test]
    fn y_rotation_prepares_plus() {
        let h = single_qubit_ansatz();
        let zero = QuantumState::Pure(StateVector::zeros(1));
        let out = evolve_state(&zero, &h, &[0.0, PI / 4.0, 0.0], 0.0, 1.0, &PropagatorConfig::exact(1.0))
            .unwrap();
        let QuantumState::Pure(out) = out else { panic!() };
        let f = crate::quantum::fidelity_pure(&out, &StateVector::plus(1)).unwrap();
        assert!((f - 1.0).abs() < 1e-9);
    }

    #[test]
    fn forward_then_backward_is_identity() {
        let (h, theta) = td_model(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = PropagatorConfig::exact(1.0);
        let rho = QuantumState::Mixed(sampling::random_density(&[2, 2], &mut rng));
        let fwd = evolve_state(&rho, &h, &theta, 0.0, 1.0, &cfg).unwrap();
        let back = evolve_state(&fwd, &h, &theta, 1.0, 0.0, &cfg).unwrap();
        assert!(linalg::max_abs_diff(back.to_density().matrix(), rho.to_density().matrix()) < 1e-9);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let (h, theta) = td_model(6);
        let s = QuantumState::Pure(StateVector::zeros(1));
        assert!(matches!(
            evolve_state(&s, &h, &theta, 0.0, 1.0, &PropagatorConfig::exact(1.0)),
            Err(QnodeError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(PropagatorConfig::new(Method::Trotter1, StepRule::Substeps(0)).is_err());
        assert!(PropagatorConfig::new(Method::Trotter1, StepRule::MaxStep(0.0)).is_err());
        assert!(PropagatorConfig::new(Method::Trotter1, StepRule::MaxStep(-1.0)).is_err());
    }

    #[test]
    fn unitarity_and_invariants_on_random_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for i in 0..100 {
            let (h, _) = td_model(100 + i);
            let theta: Vec<f64> = (0..h.n_params()).map(|_| rng.random_range(-1.5..1.5)).collect();
            let t1 = rng.random_range(0.1..2.0);
            for method in [Method::ExactSubstep, Method::Trotter1] {
                let cfg = PropagatorConfig::for_horizon(method, 2.0);
                let u = propagator(&h, &theta, 0.0, t1, &cfg).unwrap();
                assert!(linalg::unitarity_defect(&u) < 1e-9);
            }
            let rho = sampling::random_density(&[2, 2], &mut rng);
            let out = evolve_state(&rho.clone().into(), &h, &theta, 0.0, t1, &PropagatorConfig::exact(2.0))
                .unwrap()
                .to_density();
            assert!((out.trace() - 1.0).abs() < 1e-9);
            assert!((out.purity() - rho.purity()).abs() < 1e-9);
        }
    }

    #[test]
    fn exact_substep_is_self_consistent_under_doubling() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for i in 0..10 {
            let (h, _) = td_model(200 + i);
            let theta: Vec<f64> = (0..h.n_params()).map(|_| rng.random_range(-1.5..1.5)).collect();
            let horizon = 2.0;
            let base = PropagatorConfig::exact(horizon);
            let StepRule::MaxStep(dt) = base.step else { unreachable!() };
            let fine = PropagatorConfig::new(Method::ExactSubstep, StepRule::MaxStep(dt / 2.0)).unwrap();
            let a = propagator(&h, &theta, 0.0, horizon, &base).unwrap();
            let b = propagator(&h, &theta, 0.0, horizon, &fine).unwrap();
            assert!(linalg::max_abs_diff(&a, &b) < 1e-8);
        }
    }

    #[test]
    fn trotter1_converges_at_first_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = builtin_td_ising(2, 2, &mut rng).unwrap().ansatz;
        let theta = vec![0.4, 1.1, -0.3, 0.7, 0.2, 0.9, -0.5, 0.3];
        let horizon = 1.0;
        let reference = propagator(
            &h,
            &theta,
            0.0,
            horizon,
            &PropagatorConfig::new(Method::ExactSubstep, StepRule::MaxStep(1e-4)).unwrap(),
        )
        .unwrap();
        let mut points = Vec::new();
        for n in [20usize, 40, 80, 160, 320] {
            let cfg = PropagatorConfig::new(Method::Trotter1, StepRule::Substeps(n)).unwrap();
            let u = propagator(&h, &theta, 0.0, horizon, &cfg).unwrap();
            let err = linalg::max_abs_diff(&u, &reference);
            points.push(((horizon / n as f64).ln(), err.ln()));
        }
        let slope = crate::stats::fit_slope(&points);
        assert!((slope - 1.0).abs() < 0.15, "slope {slope}");
    }

    #[test]
    fn trotter_is_exact_for_commuting_terms() {
        let model = builtin_hydrogen();
        let theta = [0.0, 0.0, 0.7, 0.0];
        let cfg = PropagatorConfig::new(Method::Trotter1, StepRule::Substeps(3)).unwrap();
        let u = propagator(&model.ansatz, &theta, 0.0, 1.0, &cfg).unwrap();
        let reference = linalg::expm_hermitian(
            &("ZZ".parse::<PauliString>().unwrap().matrix() * c(0.7, 0.0)),
            1.0,
        );
        assert!(linalg::max_abs_diff(&u, &reference) < 1e-12);
    }
}
