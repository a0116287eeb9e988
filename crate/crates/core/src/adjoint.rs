//! Adjoint-state gradients: the commutator-trace oracle, the extended
//! ancilla ⊗ adjoint ⊗ original circuit estimator with shot sampling, and
//! the rule for combining signed seed components.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::block::{BlockEigen, BlockOp};
use crate::error::{QnodeError, Result};
use crate::evolution::{segment, Dynamics, PropagatorConfig};
use crate::linalg::{self, c, kron, CMat, CVec, I};
use crate::quantum::{
    controlled_swap, partial_trace_matrix, DensityMatrix, HermitianObservable, QuantumState,
    StateVector,
};

/// One term `c · A_T · a_T` of `δL/δρ` evaluated at the final state.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedComponent {
    pub coeff: f64,
    pub scale: f64,
    pub state: QuantumState,
}

/// `δL/δρ(T) = Σ_j c_j A_Tj a_Tj` with each `a_Tj` a density matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointSeed {
    components: Vec<SeedComponent>,
}

impl AdjointSeed {
    pub fn new(components: Vec<SeedComponent>) -> Result<Self> {
        let Some(first) = components.first() else {
            return Err(QnodeError::InvalidSeed("seed has no components".into()));
        };
        let d = first.state.dim();
        for comp in &components {
            if comp.state.dim() != d {
                return Err(QnodeError::DimensionMismatch {
                    expected: d,
                    found: comp.state.dim(),
                });
            }
            if comp.scale == 0.0 || !comp.scale.is_finite() || !comp.coeff.is_finite() {
                return Err(QnodeError::InvalidSeed(format!(
                    "component has coefficient {} and scale {}",
                    comp.coeff, comp.scale
                )));
            }
        }
        Ok(Self { components })
    }

    pub fn single(coeff: f64, scale: f64, state: impl Into<QuantumState>) -> Result<Self> {
        Self::new(vec![SeedComponent {
            coeff,
            scale,
            state: state.into(),
        }])
    }

    pub fn components(&self) -> &[SeedComponent] {
        &self.components
    }

    pub fn into_components(self) -> Vec<SeedComponent> {
        self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].state.dim()
    }

    /// Concatenates seeds, e.g. across a mini-batch.
    pub fn concat(seeds: Vec<AdjointSeed>) -> Result<Self> {
        Self::new(seeds.into_iter().flat_map(|s| s.components).collect())
    }

    /// Multiplies every coefficient by `factor`.
    pub fn scaled(mut self, factor: f64) -> Self {
        for comp in &mut self.components {
            comp.coeff *= factor;
        }
        self
    }

    /// Dense `Σ_j c_j A_Tj a_Tj`.
    pub fn operator(&self) -> CMat {
        let d = self.dim();
        let mut out = CMat::zeros(d, d);
        for comp in &self.components {
            out += comp.state.to_density().matrix() * c(comp.coeff * comp.scale, 0.0);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureRule {
    Trapezoid,
    Midpoint,
    UniformRandom,
}

impl fmt::Display for QuadratureRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QuadratureRule::Trapezoid => "trapezoid",
            QuadratureRule::Midpoint => "midpoint",
            QuadratureRule::UniformRandom => "uniform-random",
        })
    }
}

/// Quadrature nodes and weights on `[0, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    rule: QuadratureRule,
    horizon: f64,
    points: Vec<f64>,
    weights: Vec<f64>,
}

fn check_horizon(horizon: f64) -> Result<()> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(QnodeError::InvalidGrid(format!("horizon must be positive, got {horizon}")));
    }
    Ok(())
}

impl TimeGrid {
    /// Trapezoid rule with `intervals` equal intervals (`intervals + 1` nodes).
    pub fn trapezoid(horizon: f64, intervals: usize) -> Result<Self> {
        check_horizon(horizon)?;
        if intervals == 0 {
            return Err(QnodeError::InvalidGrid("need at least one interval".into()));
        }
        let h = horizon / intervals as f64;
        let points = (0..=intervals).map(|i| i as f64 * h).collect();
        let mut weights = vec![h; intervals + 1];
        weights[0] = h / 2.0;
        weights[intervals] = h / 2.0;
        Ok(Self {
            rule: QuadratureRule::Trapezoid,
            horizon,
            points,
            weights,
        })
    }

    /// Trapezoid rule with spacing at most `step`.
    pub fn trapezoid_with_step(horizon: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) {
            return Err(QnodeError::InvalidGrid(format!("step must be positive, got {step}")));
        }
        Self::trapezoid(horizon, intervals_for(horizon, step))
    }

    /// Midpoint rule with `cells` equal cells.
    pub fn midpoint(horizon: f64, cells: usize) -> Result<Self> {
        check_horizon(horizon)?;
        if cells == 0 {
            return Err(QnodeError::InvalidGrid("need at least one cell".into()));
        }
        let h = horizon / cells as f64;
        Ok(Self {
            rule: QuadratureRule::Midpoint,
            horizon,
            points: (0..cells).map(|i| (i as f64 + 0.5) * h).collect(),
            weights: vec![h; cells],
        })
    }

    pub fn midpoint_with_step(horizon: f64, step: f64) -> Result<Self> {
        if !(step > 0.0) {
            return Err(QnodeError::InvalidGrid(format!("step must be positive, got {step}")));
        }
        Self::midpoint(horizon, intervals_for(horizon, step))
    }

    /// `samples` i.i.d. uniform times, each weighted `T / samples`.
    pub fn uniform_random<R: Rng + ?Sized>(horizon: f64, samples: usize, rng: &mut R) -> Result<Self> {
        check_horizon(horizon)?;
        if samples == 0 {
            return Err(QnodeError::InvalidGrid("need at least one sample".into()));
        }
        let mut points: Vec<f64> = (0..samples).map(|_| rng.random_range(0.0..horizon)).collect();
        points.sort_by(|a, b| a.total_cmp(b));
        Ok(Self {
            rule: QuadratureRule::UniformRandom,
            horizon,
            points,
            weights: vec![horizon / samples as f64; samples],
        })
    }

    /// Arbitrary nodes and weights.
    pub fn custom(rule: QuadratureRule, horizon: f64, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let grid = Self {
            rule,
            horizon,
            points,
            weights,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        check_horizon(self.horizon)?;
        if self.points.is_empty() || self.points.len() != self.weights.len() {
            return Err(QnodeError::InvalidGrid("points and weights must be nonempty and aligned".into()));
        }
        if self.points.windows(2).any(|w| w[0] > w[1]) {
            return Err(QnodeError::InvalidGrid("points must be sorted".into()));
        }
        if self.points[0] < 0.0 || *self.points.last().unwrap() > self.horizon * (1.0 + 1e-12) {
            return Err(QnodeError::InvalidGrid("points must lie in [0, T]".into()));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(QnodeError::InvalidGrid("weights must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn rule(&self) -> QuadratureRule {
        self.rule
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// `ceil(T / step)` with a little slack so exact multiples do not round up.
pub fn intervals_for(horizon: f64, step: f64) -> usize {
    ((horizon / step) - 1e-9).ceil().max(1.0) as usize
}

/// Number of measurements per expectation value.
/// Serialises as a positive integer or the string `"inf"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShotBudget {
    Exact,
    Shots(u64),
}

impl ShotBudget {
    pub fn shots(n: u64) -> Result<Self> {
        if n == 0 {
            return Err(QnodeError::InvalidConfig("shot count must be at least 1".into()));
        }
        Ok(ShotBudget::Shots(n))
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, ShotBudget::Exact)
    }
}

impl fmt::Display for ShotBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShotBudget::Exact => f.write_str("inf"),
            ShotBudget::Shots(n) => write!(f, "{n}"),
        }
    }
}

impl Serialize for ShotBudget {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ShotBudget::Exact => s.serialize_str("inf"),
            ShotBudget::Shots(n) => s.serialize_u64(*n),
        }
    }
}

impl<'de> Deserialize<'de> for ShotBudget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Count(u64),
            Text(String),
        }
        let parsed = match Repr::deserialize(d)? {
            Repr::Count(n) => ShotBudget::shots(n),
            Repr::Text(t) => t.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

impl FromStr for ShotBudget {
    type Err = QnodeError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("exact") {
            return Ok(ShotBudget::Exact);
        }
        let n: u64 = s
            .parse()
            .map_err(|_| QnodeError::Parse(format!("shots must be a positive integer or inf, got {s:?}")))?;
        ShotBudget::shots(n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EstimateMeta {
    pub rule: QuadratureRule,
    pub grid_points: usize,
    pub shots: ShotBudget,
    pub master_seed: Option<u64>,
}

/// Gradient values with one standard error per component.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub meta: EstimateMeta,
}

impl GradientEstimate {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check_finite(&self) -> Result<()> {
        if self.values.iter().chain(&self.stderr).any(|v| !v.is_finite()) {
            return Err(QnodeError::NonFinite(format!("gradient {:?}", self.values)));
        }
        Ok(())
    }
}

/// `Σ_j c_j g_j`, standard errors added in quadrature.
pub fn combine_seed_parts(parts: &[GradientEstimate], coeffs: &[f64]) -> Result<GradientEstimate> {
    if parts.is_empty() || parts.len() != coeffs.len() {
        return Err(QnodeError::DimensionMismatch {
            expected: parts.len(),
            found: coeffs.len(),
        });
    }
    let m = parts[0].values.len();
    let mut values = vec![0.0; m];
    let mut var = vec![0.0; m];
    for (part, &cj) in parts.iter().zip(coeffs) {
        if part.values.len() != m {
            return Err(QnodeError::DimensionMismatch {
                expected: m,
                found: part.values.len(),
            });
        }
        for i in 0..m {
            values[i] += cj * part.values[i];
            var[i] += (cj * part.stderr[i]).powi(2);
        }
    }
    Ok(GradientEstimate {
        values,
        stderr: var.into_iter().map(f64::sqrt).collect(),
        meta: parts[0].meta.clone(),
    })
}

/// Storage for the extended register.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum RegisterBackend {
    /// Dense register for small systems, factored otherwise.
    #[default]
    Auto,
    /// The full `2d²`-dimensional register, transformed by the explicit
    /// controlled-SWAP circuit.
    Dense,
    /// The register kept as its adjoint and original factors; expectations
    /// and Born probabilities are contracted from the factors.
    Factored,
}

/// Largest register dimension `2d²` handled densely under `Auto`.
pub const AUTO_DENSE_LIMIT: usize = 32;
/// Largest register dimension accepted by the dense backend.
pub const DENSE_LIMIT: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientOptions {
    pub propagation: PropagatorConfig,
    pub backend: RegisterBackend,
}

impl GradientOptions {
    pub fn exact(horizon: f64) -> Self {
        Self {
            propagation: PropagatorConfig::exact(horizon),
            backend: RegisterBackend::Auto,
        }
    }
}

/// Pure or mixed factor of the register, stored in the working basis.
#[derive(Clone, Debug)]
pub(crate) enum Side {
    Pure(CVec),
    Mixed(CMat),
}

impl Side {
    pub(crate) fn from_state<D: Dynamics + ?Sized>(h: &D, s: &QuantumState) -> Self {
        match s {
            QuantumState::Pure(v) => Side::Pure(h.to_working_vec(v.amplitudes())),
            QuantumState::Mixed(r) => Side::Mixed(h.to_working_mat(r.matrix())),
        }
    }

    /// `u x u†`.
    pub(crate) fn forward(&self, u: &BlockOp) -> Self {
        match self {
            Side::Pure(v) => Side::Pure(u.mul_vec(v)),
            Side::Mixed(m) => Side::Mixed(u.conjugate(m)),
        }
    }

    /// `u† x u`.
    pub(crate) fn backward(&self, u: &BlockOp) -> Self {
        self.forward(&u.adjoint())
    }

    pub(crate) fn density(&self) -> CMat {
        match self {
            Side::Pure(v) => linalg::outer(v, v),
            Side::Mixed(m) => m.clone(),
        }
    }

    fn dims_state(&self, dims: &[usize]) -> QuantumState {
        match self {
            Side::Pure(v) => QuantumState::Pure(StateVector::from_raw(v.clone(), dims.to_vec())),
            Side::Mixed(m) => QuantumState::Mixed(DensityMatrix::from_raw(m.clone(), dims.to_vec())),
        }
    }
}

/// `tr(op · r · a)` contracted from the factors.
pub(crate) fn pair_trace(op: &BlockOp, adj: &Side, orig: &Side) -> Complex64 {
    match (adj, orig) {
        (Side::Pure(a), Side::Pure(r)) => a.dotc(&op.mul_vec(r)) * r.dotc(a),
        (Side::Mixed(am), Side::Pure(r)) => (am * r).dotc(&op.mul_vec(r)),
        (Side::Pure(a), Side::Mixed(rm)) => op.mul_vec(a).dotc(&(rm * a)),
        (Side::Mixed(am), Side::Mixed(rm)) => linalg::trace_product(&op.mul_mat(rm), am),
    }
}

/// `tr((σ_Y ⊗ op ⊗ 1) η)` for the register built from `adj` and `orig`.
pub(crate) fn pair_expectation(op: &BlockOp, adj: &Side, orig: &Side) -> f64 {
    pair_trace(op, adj, orig).im
}

/// Outcome values and Born probabilities for measuring `σ_Y ⊗ op` on the
/// ancilla and adjoint registers.
pub(crate) fn pair_born(eig: &BlockEigen, adj: &Side, orig: &Side) -> Vec<(f64, f64)> {
    let (alpha, beta, gamma): (Vec<f64>, Vec<f64>, Vec<Complex64>) = match (adj, orig) {
        (Side::Pure(a), Side::Pure(r)) => {
            let ca = eig.coords(a);
            let cr = eig.coords(r);
            let overlap = a.dotc(r);
            (
                ca.iter().map(|x| x.norm_sqr()).collect(),
                cr.iter().map(|x| x.norm_sqr()).collect(),
                ca.iter().zip(cr.iter()).map(|(x, y)| x * overlap * y.conj()).collect(),
            )
        }
        (Side::Mixed(am), Side::Pure(r)) => {
            let cr = eig.coords(r);
            let car = eig.coords(&(am * r));
            (
                eig.diagonal_of(am).iter().map(|x| x.re).collect(),
                cr.iter().map(|x| x.norm_sqr()).collect(),
                car.iter().zip(cr.iter()).map(|(x, y)| x * y.conj()).collect(),
            )
        }
        (Side::Pure(a), Side::Mixed(rm)) => {
            let ca = eig.coords(a);
            let cra = eig.coords(&(rm * a));
            (
                ca.iter().map(|x| x.norm_sqr()).collect(),
                eig.diagonal_of(rm).iter().map(|x| x.re).collect(),
                ca.iter().zip(cra.iter()).map(|(x, y)| x * y.conj()).collect(),
            )
        }
        (Side::Mixed(am), Side::Mixed(rm)) => (
            eig.diagonal_of(am).iter().map(|x| x.re).collect(),
            eig.diagonal_of(rm).iter().map(|x| x.re).collect(),
            eig.diagonal_of(&(am * rm)),
        ),
    };
    let mut out = Vec::with_capacity(2 * alpha.len());
    for (l, &lam) in eig.values.iter().enumerate() {
        let base = alpha[l] + beta[l];
        out.push((lam, 0.25 * (base - 2.0 * gamma[l].im)));
        out.push((-lam, 0.25 * (base + 2.0 * gamma[l].im)));
    }
    out
}

/// Sample mean and standard error of `shots` draws from a discrete
/// distribution over real outcomes.
pub(crate) fn sample_outcomes<R: Rng + ?Sized>(outcomes: &[(f64, f64)], shots: u64, rng: &mut R) -> (f64, f64) {
    let total: f64 = outcomes.iter().map(|(_, p)| p.max(0.0)).sum();
    let mut remaining = shots;
    let mut mass = 1.0;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for (value, p) in outcomes {
        if remaining == 0 {
            break;
        }
        let p = p.max(0.0) / total;
        let q = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 1.0 };
        let k = Binomial::new(remaining, q).expect("probability in [0, 1]").sample(rng);
        let kf = k as f64;
        sum += kf * value;
        sum_sq += kf * value * value;
        remaining -= k;
        mass -= p;
    }
    let n = shots as f64;
    let mean = sum / n;
    let stderr = if shots > 1 {
        let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    (mean, stderr)
}

/// Independent stream for the expectation indexed by `(component, point, term)`.
pub fn stream_rng(master: u64, component: usize, point: usize, term: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(((component as u64) << 42) ^ ((point as u64) << 21) ^ term as u64);
    rng
}

/// `|+⟩⟨+| ⊗ a_T ⊗ ρ0` on ancilla ⊗ adjoint ⊗ original; pure when both
/// inputs are.
pub fn build_eta0(adjoint: &QuantumState, rho0: &QuantumState) -> Result<QuantumState> {
    if adjoint.dim() != rho0.dim() {
        return Err(QnodeError::DimensionMismatch {
            expected: rho0.dim(),
            found: adjoint.dim(),
        });
    }
    let plus = StateVector::plus(1);
    Ok(match (adjoint, rho0) {
        (QuantumState::Pure(a), QuantumState::Pure(r)) => QuantumState::Pure(plus.tensor(a).tensor(r)),
        _ => QuantumState::Mixed(plus.to_density().tensor(&adjoint.to_density()).tensor(&rho0.to_density())),
    })
}

/// `V = C_swap (1 ⊗ u_adj ⊗ u_orig)` applied to a dense register.
pub(crate) fn apply_circuit(eta0: &QuantumState, u_adj: &CMat, u_orig: &CMat) -> QuantumState {
    let d = u_adj.nrows();
    let v = controlled_swap(d) * kron(&linalg::identity(2), &kron(u_adj, u_orig));
    match eta0 {
        QuantumState::Pure(s) => {
            QuantumState::Pure(StateVector::from_raw(&v * s.amplitudes(), s.dims().to_vec()))
        }
        QuantumState::Mixed(r) => QuantumState::Mixed(DensityMatrix::from_raw(
            &v * r.matrix() * v.adjoint(),
            r.dims().to_vec(),
        )),
    }
}

/// `η(s) = V(s) η(0) V(s)†` with `V(s) = C_swap (1 ⊗ U(T,s) ⊗ U(0,s))`.
pub fn eta_at<D: Dynamics + ?Sized>(
    eta0: &QuantumState,
    h: &D,
    theta: &[f64],
    s: f64,
    horizon: f64,
    cfg: &PropagatorConfig,
) -> Result<QuantumState> {
    if !(0.0..=horizon).contains(&s) {
        return Err(QnodeError::InvalidGrid(format!("s = {s} outside [0, {horizon}]")));
    }
    let d = h.dim();
    if eta0.dim() != 2 * d * d {
        return Err(QnodeError::DimensionMismatch {
            expected: 2 * d * d,
            found: eta0.dim(),
        });
    }
    let u_orig = segment(h, theta, 0.0, s, cfg)?.to_dense();
    let u_adj = segment(h, theta, horizon, s, cfg)?.to_dense();
    Ok(apply_circuit(eta0, &u_adj, &u_orig))
}

/// Dense `σ_Y ⊗ op ⊗ 1_d`.
pub fn extended_observable(op: &CMat) -> CMat {
    let d = op.nrows();
    kron(&linalg::pauli_y(), &kron(op, &linalg::identity(d)))
}

pub(crate) fn dense_expectation(eta: &QuantumState, obs: &CMat) -> f64 {
    match eta {
        QuantumState::Pure(s) => s.amplitudes().dotc(&(obs * s.amplitudes())).re,
        QuantumState::Mixed(r) => linalg::trace_product(obs, r.matrix()).re,
    }
}

/// Born distribution of `σ_Y ⊗ op` on `tr_orig(η)`.
fn dense_born(eta: &QuantumState, eig: &BlockEigen) -> Vec<(f64, f64)> {
    let rho = match eta {
        QuantumState::Pure(s) => linalg::outer(s.amplitudes(), s.amplitudes()),
        QuantumState::Mixed(r) => r.matrix().clone(),
    };
    let d = eig.values.len();
    let reduced = partial_trace_matrix(&rho, &[2, d, d], &[0, 1]).expect("consistent dims");
    let h = FRAC_1_SQRT_2;
    let e_plus = CVec::from_vec(vec![c(0.0, -h), c(h, 0.0)]);
    let e_minus = CVec::from_vec(vec![c(0.0, h), c(h, 0.0)]);
    let vecs = eig.vectors.to_dense();
    let mut out = Vec::with_capacity(2 * d);
    for (l, &lam) in eig.values.iter().enumerate() {
        let hl = vecs.column(l).into_owned();
        for (sign, e) in [(1.0, &e_plus), (-1.0, &e_minus)] {
            let v = linalg::kron_vec(e, &hl);
            out.push((sign * lam, v.dotc(&(&reduced * &v)).re));
        }
    }
    out
}

/// Estimate of `tr((σ_Y ⊗ H_k ⊗ 1) η)`: exact, or the mean of `shots`
/// projective measurements of `σ_Y ⊗ H_k` on the ancilla and adjoint
/// registers, with its standard error.
pub fn circuit_expectation<R: Rng + ?Sized>(
    eta: &QuantumState,
    term: &HermitianObservable,
    shots: ShotBudget,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let d = term.dim();
    if eta.dim() != 2 * d * d {
        return Err(QnodeError::DimensionMismatch {
            expected: 2 * d * d,
            found: eta.dim(),
        });
    }
    match shots {
        ShotBudget::Exact => Ok((dense_expectation(eta, &extended_observable(term.matrix())), 0.0)),
        ShotBudget::Shots(n) => {
            let spec = term.spectral();
            let eig = BlockEigen {
                values: spec.values.iter().copied().collect(),
                vectors: BlockOp::dense(spec.vectors.clone()),
            };
            Ok(sample_outcomes(&dense_born(eta, &eig), n, rng))
        }
    }
}

/// `i Σ_j c_j A_Tj ∫ tr([∂H/∂θ_m, a_j(s)] ρ(s)) ds` with exact expectations.
pub fn adjoint_oracle_gradient<D: Dynamics + ?Sized>(
    h: &D,
    theta: &[f64],
    rho0: &QuantumState,
    seed: &AdjointSeed,
    grid: &TimeGrid,
    opts: &GradientOptions,
) -> Result<GradientEstimate> {
    check_inputs(h, theta, rho0, seed, grid)?;
    let terminals = seed
        .components()
        .iter()
        .map(|comp| Side::from_state(h, &comp.state).density() * c(comp.coeff * comp.scale, 0.0))
        .collect();
    oracle(h, theta, rho0, terminals, grid, opts)
}

/// Oracle gradient for a terminal condition `δL/δρ(T)` given as a raw
/// Hermitian matrix rather than a seed.
pub fn adjoint_oracle_gradient_operator<D: Dynamics + ?Sized>(
    h: &D,
    theta: &[f64],
    rho0: &QuantumState,
    derivative: &CMat,
    grid: &TimeGrid,
    opts: &GradientOptions,
) -> Result<GradientEstimate> {
    if derivative.nrows() != h.dim() || !derivative.is_square() {
        return Err(QnodeError::DimensionMismatch {
            expected: h.dim(),
            found: derivative.nrows(),
        });
    }
    let seed = AdjointSeed::single(1.0, 1.0, DensityMatrix::maximally_mixed(h.dims().to_vec()))?;
    check_inputs(h, theta, rho0, &seed, grid)?;
    oracle(h, theta, rho0, vec![h.to_working_mat(derivative)], grid, opts)
}

fn oracle<D: Dynamics + ?Sized>(
    h: &D,
    theta: &[f64],
    rho0: &QuantumState,
    terminals: Vec<CMat>,
    grid: &TimeGrid,
    opts: &GradientOptions,
) -> Result<GradientEstimate> {
    let traj = Trajectory::build(h, theta, grid, &opts.propagation)?;
    let rho = traj.forward_dense(&Side::from_state(h, rho0).density());
    let terms: Vec<CMat> = (0..h.n_terms()).map(|k| h.term(k).to_dense()).collect();
    let mut values = vec![0.0; h.n_params()];
    for terminal in &terminals {
        let adj = traj.backward_dense(terminal);
        for (g, (&s, &w)) in grid.points().iter().zip(grid.weights()).enumerate() {
            let knot = traj.knot_of_point[g];
            let grads = h.coefficient_grads(s, theta)?;
            for (k, gk) in grads.iter().enumerate() {
                for &(m, dfk) in gk {
                    let dh = &terms[k] * c(dfk, 0.0);
                    let comm = &dh * &adj[knot] - &adj[knot] * &dh;
                    let val = I * linalg::trace_product(&comm, &rho[knot]);
                    values[m] += w * val.re;
                }
            }
        }
    }
    let est = GradientEstimate {
        stderr: vec![0.0; values.len()],
        values,
        meta: EstimateMeta {
            rule: grid.rule(),
            grid_points: grid.len(),
            shots: ShotBudget::Exact,
            master_seed: None,
        },
    };
    est.check_finite()?;
    Ok(est)
}

fn check_inputs<D: Dynamics + ?Sized>(
    h: &D,
    theta: &[f64],
    rho0: &QuantumState,
    seed: &AdjointSeed,
    grid: &TimeGrid,
) -> Result<()> {
    grid.validate()?;
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
    Ok(())
}

/// Propagators between consecutive knots `{0} ∪ grid ∪ {T}`.
pub(crate) struct Trajectory {
    pub(crate) steps: Vec<BlockOp>,
    pub(crate) knot_of_point: Vec<usize>,
    n_knots: usize,
}

impl Trajectory {
    pub(crate) fn build<D: Dynamics + ?Sized>(
        h: &D,
        theta: &[f64],
        grid: &TimeGrid,
        cfg: &PropagatorConfig,
    ) -> Result<Self> {
        let horizon = grid.horizon();
        let mut knots = vec![0.0];
        let mut knot_of_point = Vec::with_capacity(grid.len());
        for &s in grid.points() {
            if s > *knots.last().unwrap() {
                knots.push(s);
            }
            knot_of_point.push(knots.len() - 1);
        }
        if horizon > *knots.last().unwrap() {
            knots.push(horizon);
        }
        let steps = if h.is_time_independent() && cfg.method == crate::evolution::Method::ExactSubstep {
            let eig = h.generator(0.0, theta)?.eigh();
            knots.windows(2).map(|w| eig.exp(w[1] - w[0])).collect()
        } else {
            knots
                .windows(2)
                .map(|w| segment(h, theta, w[0], w[1], cfg))
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self {
            n_knots: knots.len(),
            steps,
            knot_of_point,
        })
    }

    /// States `U(0, s) x U(0, s)†` at every knot.
    pub(crate) fn forward(&self, start: &Side) -> Vec<Side> {
        let mut out = Vec::with_capacity(self.n_knots);
        out.push(start.clone());
        for u in &self.steps {
            let next = out.last().unwrap().forward(u);
            out.push(next);
        }
        out
    }

    /// States `U(T, s) x U(T, s)†` at every knot.
    pub(crate) fn backward(&self, terminal: &Side) -> Vec<Side> {
        let mut out = vec![terminal.clone()];
        for u in self.steps.iter().rev() {
            let next = out.last().unwrap().backward(u);
            out.push(next);
        }
        out.reverse();
        out
    }

    fn forward_dense(&self, start: &CMat) -> Vec<CMat> {
        self.forward(&Side::Mixed(start.clone()))
            .into_iter()
            .map(|s| s.density())
            .collect()
    }

    fn backward_dense(&self, terminal: &CMat) -> Vec<CMat> {
        self.backward(&Side::Mixed(terminal.clone()))
            .into_iter()
            .map(|s| s.density())
            .collect()
    }

    /// Cumulative `U(0, knot)` for every knot.
    pub(crate) fn cumulative(&self) -> Vec<BlockOp> {
        let first = &self.steps[0];
        let mut out = vec![BlockOp::identity(first.block_size(), first.blocks().len())];
        for u in &self.steps {
            let next = u.compose(out.last().unwrap());
            out.push(next);
        }
        out
    }
}

/// Decides whether the dense circuit is used for a register of size `2d²`.
pub(crate) fn use_dense(backend: RegisterBackend, d: usize) -> Result<bool> {
    let size = 2 * d * d;
    match backend {
        RegisterBackend::Auto => Ok(size <= AUTO_DENSE_LIMIT),
        RegisterBackend::Factored => Ok(false),
        RegisterBackend::Dense if size <= DENSE_LIMIT => Ok(true),
        RegisterBackend::Dense => Err(QnodeError::InvalidConfig(format!(
            "dense register of dimension {size} exceeds {DENSE_LIMIT}"
        ))),
    }
}

/// Expectations `E[j][g][k]` of `σ_Y ⊗ H_k ⊗ 1` on `η_j(s_g)` with their
/// standard errors.
#[allow(clippy::type_complexity)]
fn circuit_table<D: Dynamics + ?Sized>(
    h: &D,
    theta: &[f64],
    rho0: &QuantumState,
    seed: &AdjointSeed,
    grid: &TimeGrid,
    shots: ShotBudget,
    master: u64,
    opts: &GradientOptions,
) -> Result<Vec<Vec<Vec<(f64, f64)>>>> {
    let traj = Trajectory::build(h, theta, grid, &opts.propagation)?;
    let d = h.dim();
    let n_terms = h.n_terms();
    let dense = use_dense(opts.backend, d)?;
    let mut table = Vec::with_capacity(seed.components().len());

    if dense {
        let cumulative: Vec<CMat> = traj.cumulative().iter().map(|u| u.to_dense()).collect();
        let to_t = cumulative.last().unwrap().adjoint();
        let observables: Vec<CMat> = (0..n_terms)
            .map(|k| extended_observable(&h.term(k).to_dense()))
            .collect();
        let dims = vec![d];
        let rho_w = Side::from_state(h, rho0).dims_state(&dims);
        for (j, comp) in seed.components().iter().enumerate() {
            let a_w = Side::from_state(h, &comp.state).dims_state(&dims);
            let eta0 = build_eta0(&a_w, &rho_w)?;
            let mut rows = Vec::with_capacity(grid.len());
            for g in 0..grid.len() {
                let u0 = &cumulative[traj.knot_of_point[g]];
                let ut = u0 * &to_t;
                let eta = apply_circuit(&eta0, &ut, u0);
                let mut row = Vec::with_capacity(n_terms);
                for k in 0..n_terms {
                    row.push(match shots {
                        ShotBudget::Exact => (dense_expectation(&eta, &observables[k]), 0.0),
                        ShotBudget::Shots(n) => {
                            let mut rng = stream_rng(master, j, g, k);
                            sample_outcomes(&dense_born(&eta, h.term_eigen(k)), n, &mut rng)
                        }
                    });
                }
                rows.push(row);
            }
            table.push(rows);
        }
        return Ok(table);
    }

    let orig = traj.forward(&Side::from_state(h, rho0));
    for (j, comp) in seed.components().iter().enumerate() {
        let terminal = Side::from_state(h, &comp.state);
        let mut adj = match (&terminal, orig.last(), shots) {
            (Side::Mixed(am), Some(Side::Pure(r)), ShotBudget::Exact) => Carried::Product(am * r),
            _ => Carried::Factor(terminal),
        };
        let mut rows = vec![Vec::new(); grid.len()];
        let mut pending = grid.len();
        for knot in (0..traj.n_knots).rev() {
            if knot + 1 < traj.n_knots {
                adj = adj.backward(&traj.steps[knot]);
            }
            while pending > 0 && traj.knot_of_point[pending - 1] == knot {
                let g = pending - 1;
                rows[g] = (0..n_terms)
                    .map(|k| match (&adj, shots) {
                        (Carried::Product(b), _) => {
                            let Side::Pure(r) = &orig[knot] else { unreachable!() };
                            (b.dotc(&h.term(k).mul_vec(r)).im, 0.0)
                        }
                        (Carried::Factor(a), ShotBudget::Exact) => (pair_expectation(h.term(k), a, &orig[knot]), 0.0),
                        (Carried::Factor(a), ShotBudget::Shots(n)) => {
                            let mut rng = stream_rng(master, j, g, k);
                            sample_outcomes(&pair_born(h.term_eigen(k), a, &orig[knot]), n, &mut rng)
                        }
                    })
                    .collect();
                pending -= 1;
            }
        }
        table.push(rows);
    }
    Ok(table)
}

/// Backward-propagated adjoint data: the full factor, or for exact
/// expectations with a pure original state only `b(s) = a(s) r(s)`, since
/// `tr(H ρ a) = ⟨b|H|r⟩` and `b(s) = U(T,s) b(T)`.
enum Carried {
    Factor(Side),
    Product(CVec),
}

impl Carried {
    fn backward(self, u: &BlockOp) -> Self {
        match self {
            Carried::Factor(side) => Carried::Factor(side.backward(u)),
            Carried::Product(b) => Carried::Product(u.adjoint().mul_vec(&b)),
        }
    }
}

/// Per-component gradients `2 A_Tj Σ_g w_g Σ_k ∂f_k/∂θ_m(s_g) E[j][g][k]`
/// before the `c_j` weights are applied.
pub fn circuit_component_gradients<D: Dynamics + ?Sized, R: Rng + ?Sized>(
    h: &D,
    theta: &[f64],
    rho0: &QuantumState,
    seed: &AdjointSeed,
    grid: &TimeGrid,
    shots: ShotBudget,
    rng: &mut R,
    opts: &GradientOptions,
) -> Result<Vec<GradientEstimate>> {
    check_inputs(h, theta, rho0, seed, grid)?;
    let master = if shots.is_exact() { 0 } else { rng.random::<u64>() };
    let table = circuit_table(h, theta, rho0, seed, grid, shots, master, opts)?;
    let schedule_grads: Vec<Vec<Vec<(usize, f64)>>> = grid
        .points()
        .iter()
        .map(|&s| h.coefficient_grads(s, theta))
        .collect::<Result<_>>()?;
    let meta = EstimateMeta {
        rule: grid.rule(),
        grid_points: grid.len(),
        shots,
        master_seed: (!shots.is_exact()).then_some(master),
    };
    let mut parts = Vec::with_capacity(table.len());
    for (comp, rows) in seed.components().iter().zip(&table) {
        let mut values = vec![0.0; h.n_params()];
        let mut var = vec![0.0; h.n_params()];
        for (g, row) in rows.iter().enumerate() {
            let w = grid.weights()[g];
            for (k, &(e, se)) in row.iter().enumerate() {
                for &(m, dfk) in &schedule_grads[g][k] {
                    let factor = 2.0 * comp.scale * w * dfk;
                    values[m] += factor * e;
                    var[m] += (factor * se).powi(2);
                }
            }
        }
        parts.push(GradientEstimate {
            values,
            stderr: var.into_iter().map(f64::sqrt).collect(),
            meta: meta.clone(),
        });
    }
    Ok(parts)
}

/// Extended-circuit gradient estimate combined over all seed components.
pub fn circuit_gradient<D: Dynamics + ?Sized, R: Rng + ?Sized>(
    h: &D,
    theta: &[f64],
    rho0: &QuantumState,
    seed: &AdjointSeed,
    grid: &TimeGrid,
    shots: ShotBudget,
    rng: &mut R,
    opts: &GradientOptions,
) -> Result<GradientEstimate> {
    let parts = circuit_component_gradients(h, theta, rho0, seed, grid, shots, rng, opts)?;
    let coeffs: Vec<f64> = seed.components().iter().map(|c| c.coeff).collect();
    let est = combine_seed_parts(&parts, &coeffs)?;
    est.check_finite()?;
    Ok(est)
}
