//! Gradient from a single expectation on a clock-extended register.
//!
//! The clock is a finite grid of times `s_i` with weights `w_i` and density
//! samples `g(s_i)`. The extended state is block diagonal over the grid, so
//! each block is the ordinary extended register at `s_i`.

use rand::Rng;

use crate::adjoint::{
    apply_circuit, build_eta0, combine_seed_parts, pair_born, pair_expectation, sample_outcomes, stream_rng,
    AdjointSeed, EstimateMeta, GradientEstimate, QuadratureRule, ShotBudget, Side,
};
use crate::block::BlockOp;
use crate::error::{QnodeError, Result};
use crate::evolution::Dynamics;
use crate::quantum::QuantumState;

/// Clock density on `[0, T]` or a smoothed version of it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GFunction {
    /// `1/T` on `[0, T]`.
    TopHat,
    /// Top-hat whose edges at 0 and T are replaced by half-cosine ramps of
    /// width `taper` centred on the edges. Continuous, and integrates to 1.
    RaisedCosine { taper: f64 },
}

impl GFunction {
    pub fn validate(&self, horizon: f64) -> Result<()> {
        if let GFunction::RaisedCosine { taper } = self {
            if !(*taper > 0.0) || *taper > horizon {
                return Err(QnodeError::InvalidConfig(format!(
                    "taper must lie in (0, T], got {taper}"
                )));
            }
        }
        Ok(())
    }

    /// Interval outside which `g` vanishes.
    pub fn support(&self, horizon: f64) -> (f64, f64) {
        match self {
            GFunction::TopHat => (0.0, horizon),
            GFunction::RaisedCosine { taper } => (-taper / 2.0, horizon + taper / 2.0),
        }
    }

    pub fn value(&self, s: f64, horizon: f64) -> f64 {
        match *self {
            GFunction::TopHat => {
                if (0.0..=horizon).contains(&s) {
                    1.0 / horizon
                } else {
                    0.0
                }
            }
            GFunction::RaisedCosine { taper } => {
                let ramp = |x: f64| {
                    if x <= -taper / 2.0 {
                        0.0
                    } else if x >= taper / 2.0 {
                        1.0
                    } else {
                        0.5 * (1.0 + (std::f64::consts::PI * x / taper).sin())
                    }
                };
                ramp(s).min(ramp(horizon - s)) / horizon
            }
        }
    }
}

/// Clock grid with quadrature weights and density samples.
#[derive(Clone, Debug, PartialEq)]
pub struct SRegister {
    points: Vec<f64>,
    weights: Vec<f64>,
    density: Vec<f64>,
}

/// Tolerance on `Σ w_i g(s_i) = 1`.
pub const DENSITY_NORM_TOL: f64 = 1e-9;

impl SRegister {
    /// Midpoint grid with `cells` cells on `[0, T]`, extended by whole cells
    /// until it covers the support of `g`.
    pub fn midpoint(horizon: f64, cells: usize, g: &GFunction) -> Result<Self> {
        if !(horizon > 0.0) || cells == 0 {
            return Err(QnodeError::InvalidGrid(format!(
                "need T > 0 and at least one cell, got T = {horizon}, cells = {cells}"
            )));
        }
        g.validate(horizon)?;
        let h = horizon / cells as f64;
        let (lo, hi) = g.support(horizon);
        let pad_lo = ((-lo / h) - 1e-9).ceil().max(0.0) as i64;
        let pad_hi = (((hi - horizon) / h) - 1e-9).ceil().max(0.0) as i64;
        let points: Vec<f64> = (-pad_lo..cells as i64 + pad_hi)
            .map(|i| (i as f64 + 0.5) * h)
            .collect();
        let weights = vec![h; points.len()];
        let density = points.iter().map(|&s| g.value(s, horizon)).collect();
        Self::from_parts(points, weights, density)
    }

    pub fn from_parts(points: Vec<f64>, weights: Vec<f64>, density: Vec<f64>) -> Result<Self> {
        let reg = Self {
            points,
            weights,
            density,
        };
        reg.validate()?;
        Ok(reg)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.points.len();
        if n == 0 || self.weights.len() != n || self.density.len() != n {
            return Err(QnodeError::InvalidGrid("clock grid arrays must be nonempty and aligned".into()));
        }
        if self.points.windows(2).any(|w| w[0] > w[1]) {
            return Err(QnodeError::InvalidGrid("clock points must be sorted".into()));
        }
        if self.weights.iter().chain(&self.density).any(|x| !(*x >= 0.0)) {
            return Err(QnodeError::InvalidGrid("weights and density must be nonnegative".into()));
        }
        let mass = self.mass();
        if (mass - 1.0).abs() > DENSITY_NORM_TOL {
            return Err(QnodeError::Unnormalised(mass));
        }
        Ok(())
    }

    /// Same grid, density replaced by samples of `g`.
    pub fn with_function(&self, g: &GFunction, horizon: f64) -> Result<Self> {
        g.validate(horizon)?;
        Self::from_parts(
            self.points.clone(),
            self.weights.clone(),
            self.points.iter().map(|&s| g.value(s, horizon)).collect(),
        )
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `Σ w_i g(s_i)`.
    pub fn mass(&self) -> f64 {
        self.weights.iter().zip(&self.density).map(|(w, g)| w * g).sum()
    }

    fn same_grid(&self, other: &SRegister) -> Result<()> {
        if self.points != other.points || self.weights != other.weights {
            return Err(QnodeError::InvalidGrid("densities live on different clock grids".into()));
        }
        Ok(())
    }
}

/// `Σ w_i |g1(s_i) − g2(s_i)|`.
pub fn l1_distance(a: &SRegister, b: &SRegister) -> Result<f64> {
    a.same_grid(b)?;
    for r in [a, b] {
        let mass = r.mass();
        if (mass - 1.0).abs() > DENSITY_NORM_TOL {
            return Err(QnodeError::Unnormalised(mass));
        }
    }
    Ok(a
        .weights
        .iter()
        .zip(a.density.iter().zip(&b.density))
        .map(|(w, (x, y))| w * (x - y).abs())
        .sum())
}

/// Total variation `½ Σ w_i |g1(s_i) − g2(s_i)|`.
pub fn tv_distance(a: &SRegister, b: &SRegister) -> Result<f64> {
    Ok(0.5 * l1_distance(a, b)?)
}

/// Block-diagonal clock-extended register `Σ_i w_i g(s_i) |s_i⟩⟨s_i| ⊗ η(s_i)`.
#[derive(Clone, Debug)]
pub struct HatEta {
    pub points: Vec<f64>,
    /// `(w_i g(s_i), η(s_i))` per clock point.
    pub blocks: Vec<(f64, QuantumState)>,
}

impl HatEta {
    pub fn trace(&self) -> f64 {
        self.blocks.iter().map(|(p, eta)| p * eta.to_density().trace()).sum()
    }
}

fn require_time_independent<D: Dynamics + ?Sized>(h: &D) -> Result<()> {
    if !h.is_time_independent() {
        return Err(QnodeError::TimeDependent);
    }
    Ok(())
}

/// Builds the clock-extended register for one seed state. The adjoint
/// factor at `s` is evolved by `e^{iH(T−s)}`, the original by `e^{−iHs}`.
pub fn build_hat_eta<D: Dynamics + ?Sized>(
    h: &D,
    theta: &[f64],
    adjoint: &QuantumState,
    rho0: &QuantumState,
    sreg: &SRegister,
    horizon: f64,
) -> Result<HatEta> {
    require_time_independent(h)?;
    let eig = h.generator(0.0, theta)?.eigh();
    let work = |s: &QuantumState| -> QuantumState {
        match s {
            QuantumState::Pure(v) => crate::quantum::StateVector::from_raw(h.to_working_vec(v.amplitudes()), v.dims().to_vec()).into(),
            QuantumState::Mixed(r) => crate::quantum::DensityMatrix::from_raw(h.to_working_mat(r.matrix()), r.dims().to_vec()).into(),
        }
    };
    let eta0 = build_eta0(&work(adjoint), &work(rho0))?;
    let blocks = sreg
        .points
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let u_orig = eig.exp(s).to_dense();
            let u_adj = eig.exp(s - horizon).to_dense();
            (sreg.weights[i] * sreg.density[i], apply_circuit(&eta0, &u_adj, &u_orig))
        })
        .collect();
    Ok(HatEta {
        points: sreg.points.clone(),
        blocks,
    })
}

/// `∂H/∂θ_m` for every parameter of a time-independent model.
pub fn parameter_derivatives<D: Dynamics + ?Sized>(h: &D, theta: &[f64]) -> Result<Vec<BlockOp>> {
    let grads = h.coefficient_grads(0.0, theta)?;
    let first = h.term(0);
    let mut out = vec![BlockOp::zeros(first.block_size(), first.blocks().len()); h.n_params()];
    for (k, gk) in grads.iter().enumerate() {
        for &(m, d) in gk {
            out[m].axpy(d, h.term(k));
        }
    }
    Ok(out)
}

/// `2 T Σ_j c_j A_Tj tr((1_s ⊗ σ_Y ⊗ ∂H/∂θ_m ⊗ 1) η̂_j)` per parameter. With
/// finite shots each `(j, m)` is one measurement series of the clock-extended
/// observable.
#[allow(clippy::too_many_arguments)]
pub fn clock_gradient<D: Dynamics + ?Sized, R: Rng + ?Sized>(
    h: &D,
    theta: &[f64],
    rho0: &QuantumState,
    seed: &AdjointSeed,
    horizon: f64,
    sreg: &SRegister,
    shots: ShotBudget,
    rng: &mut R,
) -> Result<GradientEstimate> {
    require_time_independent(h)?;
    sreg.validate()?;
    if !(horizon >= 0.0) {
        return Err(QnodeError::InvalidGrid(format!("horizon must be nonnegative, got {horizon}")));
    }
    if theta.len() != h.n_params() {
        return Err(QnodeError::ThetaLength {
            expected: h.n_params(),
            found: theta.len(),
        });
    }
    for d in [rho0.dim(), seed.dim()] {
        if d != h.dim() {
            return Err(QnodeError::DimensionMismatch {
                expected: h.dim(),
                found: d,
            });
        }
    }
    let master = if shots.is_exact() { 0 } else { rng.random::<u64>() };
    let eig = h.generator(0.0, theta)?.eigh();
    let derivs = parameter_derivatives(h, theta)?;
    let deriv_eigs: Vec<_> = match shots {
        ShotBudget::Exact => Vec::new(),
        ShotBudget::Shots(_) => derivs.iter().map(|d| d.eigh()).collect(),
    };
    let orig0 = Side::from_state(h, rho0);
    let orig: Vec<Side> = sreg.points.iter().map(|&s| orig0.forward(&eig.exp(s))).collect();
    let probs: Vec<f64> = sreg.weights.iter().zip(&sreg.density).map(|(w, g)| w * g).collect();

    let mut parts = Vec::with_capacity(seed.components().len());
    for (j, comp) in seed.components().iter().enumerate() {
        let adj0 = Side::from_state(h, &comp.state);
        let adj: Vec<Side> = sreg.points.iter().map(|&s| adj0.forward(&eig.exp(s - horizon))).collect();
        let factor = 2.0 * horizon * comp.scale;
        let mut values = Vec::with_capacity(derivs.len());
        let mut stderr = Vec::with_capacity(derivs.len());
        for (m, dm) in derivs.iter().enumerate() {
            match shots {
                ShotBudget::Exact => {
                    let e: f64 = (0..sreg.len())
                        .map(|i| probs[i] * pair_expectation(dm, &adj[i], &orig[i]))
                        .sum();
                    values.push(factor * e);
                    stderr.push(0.0);
                }
                ShotBudget::Shots(n) => {
                    let mut outcomes = Vec::new();
                    for i in 0..sreg.len() {
                        if probs[i] > 0.0 {
                            outcomes.extend(
                                pair_born(&deriv_eigs[m], &adj[i], &orig[i])
                                    .into_iter()
                                    .map(|(v, p)| (v, probs[i] * p)),
                            );
                        }
                    }
                    let mut stream = stream_rng(master, j, 0, m);
                    let (e, se) = sample_outcomes(&outcomes, n, &mut stream);
                    values.push(factor * e);
                    stderr.push(factor.abs() * se);
                }
            }
        }
        parts.push(GradientEstimate {
            values,
            stderr,
            meta: EstimateMeta {
                rule: QuadratureRule::Midpoint,
                grid_points: sreg.len(),
                shots,
                master_seed: (!shots.is_exact()).then_some(master),
            },
        });
    }
    let coeffs: Vec<f64> = seed.components().iter().map(|c| c.coeff).collect();
    combine_seed_parts(&parts, &coeffs)
}

/// Both sides of the smoothing bound for one parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub holds: bool,
}

/// Slack added to the right-hand side before comparing.
pub const BOUND_SLACK: f64 = 1e-9;

/// Compares the gradient from `g` against the top-hat gradient on the same
/// clock grid. `lhs = |G_top − G_g| / (2T Σ_j |c_j A_Tj|)` and
/// `rhs = ‖∂H/∂θ_m‖_∞ Σ_i w_i |g_top(s_i) − g(s_i)|`.
#[allow(clippy::too_many_arguments)]
pub fn bound_check<D: Dynamics + ?Sized>(
    h: &D,
    theta: &[f64],
    rho0: &QuantumState,
    seed: &AdjointSeed,
    horizon: f64,
    g: &GFunction,
    cells: usize,
) -> Result<BoundReport> {
    let smooth = SRegister::midpoint(horizon, cells, g)?;
    let top = smooth.with_function(&GFunction::TopHat, horizon)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let g_top = clock_gradient(h, theta, rho0, seed, horizon, &top, ShotBudget::Exact, &mut rng)?;
    let g_smooth = clock_gradient(h, theta, rho0, seed, horizon, &smooth, ShotBudget::Exact, &mut rng)?;
    let l1 = l1_distance(&top, &smooth)?;
    let norm: f64 = seed.components().iter().map(|c| (c.coeff * c.scale).abs()).sum();
    let derivs = parameter_derivatives(h, theta)?;
    let lhs: Vec<f64> = g_top
        .values
        .iter()
        .zip(&g_smooth.values)
        .map(|(a, b)| (a - b).abs() / (2.0 * horizon * norm))
        .collect();
    let rhs: Vec<f64> = derivs
        .iter()
        .map(|d| d.eigh().values.iter().fold(0.0f64, |acc, v| acc.max(v.abs())) * l1)
        .collect();
    let holds = lhs.iter().zip(&rhs).all(|(l, r)| *l <= r + BOUND_SLACK);
    Ok(BoundReport { lhs, rhs, holds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::{adjoint_oracle_gradient, eta_at, circuit_gradient, GradientOptions, TimeGrid};
    use crate::evolution::PropagatorConfig;
    use crate::hamiltonian::{builtin_hydrogen, single_qubit_ansatz};
    use crate::linalg;
    use crate::quantum::StateVector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (crate::hamiltonian::ParametricHamiltonian, Vec<f64>, QuantumState, AdjointSeed) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = builtin_hydrogen().ansatz;
        let theta: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rho0: QuantumState = crate::sampling::random_pure(&[2, 2], &mut rng).into();
        let seed = AdjointSeed::single(1.0, -1.0, crate::sampling::random_pure(&[2, 2], &mut rng)).unwrap();
        (h, theta, rho0, seed)
    }

    #[test]
    fn top_hat_blocks_match_the_discrete_register() {
        let (h, theta, rho0, seed) = setup(1);
        let sreg = SRegister::midpoint(1.0, 8, &GFunction::TopHat).unwrap();
        let a = &seed.components()[0].state;
        let hat = build_hat_eta(&h, &theta, a, &rho0, &sreg, 1.0).unwrap();
        assert!((hat.trace() - 1.0).abs() < 1e-10);
        let eta0 = build_eta0(a, &rho0).unwrap();
        for ((p, block), &s) in hat.blocks.iter().zip(sreg.points()) {
            assert!((p - 1.0 / 8.0).abs() < 1e-15);
            let direct = eta_at(&eta0, &h, &theta, s, 1.0, &PropagatorConfig::exact(1.0)).unwrap();
            let diff = linalg::max_abs_diff(block.to_density().matrix(), direct.to_density().matrix());
            assert!(diff < 1e-10, "{diff}");
        }
    }

    #[test]
    fn point_mass_register_reduces_to_one_block() {
        let (h, theta, rho0, seed) = setup(2);
        let sreg = SRegister::from_parts(vec![0.3], vec![1.0], vec![1.0]).unwrap();
        let a = &seed.components()[0].state;
        let hat = build_hat_eta(&h, &theta, a, &rho0, &sreg, 1.0).unwrap();
        let direct = eta_at(&build_eta0(a, &rho0).unwrap(), &h, &theta, 0.3, 1.0, &PropagatorConfig::exact(1.0)).unwrap();
        assert_eq!(hat.blocks.len(), 1);
        assert!(linalg::max_abs_diff(hat.blocks[0].1.to_density().matrix(), direct.to_density().matrix()) < 1e-12);
    }

    #[test]
    fn top_hat_matches_the_midpoint_rule() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for inst in 0..5 {
            let (h, theta, rho0, seed) = setup(10 + inst);
            let sreg = SRegister::midpoint(1.3, 16, &GFunction::TopHat).unwrap();
            let g3 = clock_gradient(&h, &theta, &rho0, &seed, 1.3, &sreg, ShotBudget::Exact, &mut rng).unwrap();
            let grid = TimeGrid::midpoint(1.3, 16).unwrap();
            let g2 = circuit_gradient(&h, &theta, &rho0, &seed, &grid, ShotBudget::Exact, &mut rng, &GradientOptions::exact(1.3))
                .unwrap();
            for (a, b) in g3.values.iter().zip(&g2.values) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn dense_register_expectation_matches_engine() {
        let (h, theta, rho0, seed) = setup(4);
        let g = GFunction::RaisedCosine { taper: 0.3 };
        let sreg = SRegister::midpoint(1.0, 10, &g).unwrap();
        let hat = build_hat_eta(&h, &theta, &seed.components()[0].state, &rho0, &sreg, 1.0).unwrap();
        let derivs = parameter_derivatives(&h, &theta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g3 = clock_gradient(&h, &theta, &rho0, &seed, 1.0, &sreg, ShotBudget::Exact, &mut rng).unwrap();
        for (m, dm) in derivs.iter().enumerate() {
            let obs = crate::adjoint::extended_observable(&dm.to_dense());
            let e: f64 = hat
                .blocks
                .iter()
                .map(|(p, eta)| p * crate::adjoint::dense_expectation(eta, &obs))
                .sum();
            assert!((2.0 * -1.0 * e - g3.values[m]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_horizon_gives_zero_gradient() {
        let (h, theta, rho0, seed) = setup(5);
        let sreg = SRegister::from_parts(vec![0.0], vec![1.0], vec![1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = clock_gradient(&h, &theta, &rho0, &seed, 0.0, &sreg, ShotBudget::Exact, &mut rng).unwrap();
        assert!(g.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn time_dependent_models_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let td = crate::hamiltonian::builtin_td_ising(2, 2, &mut rng).unwrap().ansatz;
        let theta = vec![0.1; td.n_params()];
        let sreg = SRegister::midpoint(1.0, 4, &GFunction::TopHat).unwrap();
        let rho0: QuantumState = StateVector::plus(2).into();
        let seed = AdjointSeed::single(1.0, -1.0, StateVector::zeros(2)).unwrap();
        assert_eq!(
            clock_gradient(&td, &theta, &rho0, &seed, 1.0, &sreg, ShotBudget::Exact, &mut rng).unwrap_err(),
            QnodeError::TimeDependent
        );
        assert!(build_hat_eta(&td, &theta, &rho0, &rho0, &sreg, 1.0).is_err());
    }

    #[test]
    fn tv_examples() {
        let a = SRegister::from_parts(vec![0.25, 0.75], vec![0.5, 0.5], vec![2.0, 0.0]).unwrap();
        let b = SRegister::from_parts(vec![0.25, 0.75], vec![0.5, 0.5], vec![0.0, 2.0]).unwrap();
        assert_eq!(tv_distance(&a, &a).unwrap(), 0.0);
        assert!((tv_distance(&a, &b).unwrap() - 1.0).abs() < 1e-15);
        assert!(SRegister::from_parts(vec![0.5], vec![1.0], vec![0.5]).is_err());
    }

    #[test]
    fn tv_of_raised_cosine_matches_direct_sum() {
        let horizon = 2.0;
        let taper = 0.1 * horizon;
        let g = GFunction::RaisedCosine { taper };
        let smooth = SRegister::midpoint(horizon, 2000, &g).unwrap();
        let top = smooth.with_function(&GFunction::TopHat, horizon).unwrap();
        // independent evaluation of both densities from their formulas
        let mut direct = 0.0;
        for (&s, &w) in smooth.points().iter().zip(smooth.weights()) {
            let top_val = if (0.0..=horizon).contains(&s) { 1.0 / horizon } else { 0.0 };
            let edge = s.min(horizon - s);
            let ramp = if edge >= taper / 2.0 {
                1.0
            } else if edge <= -taper / 2.0 {
                0.0
            } else {
                0.5 * (1.0 + (std::f64::consts::PI * edge / taper).sin())
            };
            direct += 0.5 * w * (top_val - ramp / horizon).abs();
        }
        let tv = tv_distance(&top, &smooth).unwrap();
        assert!((tv - direct).abs() < 1e-12);
        // continuum value (τ/T)(1 − 2/π)/2
        let analytic = 0.5 * (taper / horizon) * (1.0 - 2.0 / std::f64::consts::PI);
        assert!((tv - analytic).abs() < 1e-5, "{tv} {analytic}");
    }

    #[test]
    fn raised_cosine_is_normalised_and_continuous() {
        let g = GFunction::RaisedCosine { taper: 0.4 };
        let reg = SRegister::midpoint(1.0, 50, &g).unwrap();
        assert!((reg.mass() - 1.0).abs() < 1e-12);
        for s in [-0.2, 0.2, 0.8, 1.2] {
            let left = g.value(s - 1e-9, 1.0);
            let right = g.value(s + 1e-9, 1.0);
            assert!((left - right).abs() < 1e-6);
        }
    }

    #[test]
    fn bound_holds_and_tracks_the_taper() {
        let (h, theta, rho0, seed) = setup(7);
        let top = bound_check(&h, &theta, &rho0, &seed, 1.0, &GFunction::TopHat, 40).unwrap();
        assert!(top.holds);
        assert!(top.lhs.iter().chain(&top.rhs).all(|v| v.abs() < 1e-12));
        let wide = bound_check(&h, &theta, &rho0, &seed, 1.0, &GFunction::RaisedCosine { taper: 0.4 }, 40).unwrap();
        let narrow = bound_check(&h, &theta, &rho0, &seed, 1.0, &GFunction::RaisedCosine { taper: 0.2 }, 40).unwrap();
        assert!(wide.holds && narrow.holds);
        for (w, n) in wide.rhs.iter().zip(&narrow.rhs) {
            assert!((n / w - 0.5).abs() < 0.05, "{n} {w}");
        }
    }

    #[test]
    fn pauli_derivative_norm_is_one() {
        let h = single_qubit_ansatz();
        let d = parameter_derivatives(&h, &[0.3, 0.2, 0.1]).unwrap();
        let obs = crate::adjoint::extended_observable(&d[0].to_dense());
        let norm = linalg::operator_norm_hermitian(&obs);
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn refinement_converges_to_the_oracle_at_second_order() {
        let (h, theta, rho0, seed) = setup(8);
        let horizon = 1.5;
        let reference = adjoint_oracle_gradient(
            &h,
            &theta,
            &rho0,
            &seed,
            &TimeGrid::trapezoid(horizon, 20_000).unwrap(),
            &GradientOptions::exact(horizon),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for cells in [8, 16, 32, 64] {
            let sreg = SRegister::midpoint(horizon, cells, &GFunction::TopHat).unwrap();
            let g = clock_gradient(&h, &theta, &rho0, &seed, horizon, &sreg, ShotBudget::Exact, &mut rng).unwrap();
            let err = g
                .values
                .iter()
                .zip(&reference.values)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            xs.push(horizon / cells as f64);
            ys.push(err);
        }
        let slope = crate::stats::loglog_slope(&xs, &ys);
        assert!((slope - 2.0).abs() < 0.2, "slope {slope} errors {ys:?}");
    }
}
