//! Optimisers, datasets, the infidelity test metric and the training loop
//! that ties losses to the gradient engine.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::{circuit_gradient, AdjointSeed, GradientOptions, QuadratureRule, RegisterBackend, ShotBudget, TimeGrid};
use crate::error::{QnodeError, Result};
use crate::evolution::{evolve_state, Method, PropagatorConfig};
use crate::hamiltonian::{builtin_hydrogen, builtin_ising, builtin_td_ising, single_qubit_ansatz, Builtin, ModelDescription, ParametricHamiltonian, Schedule};
use crate::linalg::{c, CVec};
use crate::loss::{hamlearn_loss_and_seeds, observable_loss_and_seed, ObservableRecord, ObservableSpec, StatePair};
use crate::quantum::{random_input_state, rotated_plus_state, Pauli, PauliString, QuantumState, StateVector};
use crate::schrodinger::{self, basis_projectors, collocation_values, dilate, dilated_initial_state, CollocationRecord, DilatedHamiltonian, LinearSystem, XiRegister};

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr() > 0.0) || !self.lr().is_finite() {
            return Err(QnodeError::InvalidConfig(format!("learning rate must be positive, got {}", self.lr())));
        }
        if let OptimizerConfig::Adam { beta1, beta2, eps, .. } = *self {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(QnodeError::InvalidConfig("Adam needs 0 ≤ β < 1 and ε > 0".into()));
            }
        }
        Ok(())
    }
}

/// First and second moment estimates of Adam.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(state: &mut AdamState, theta: &mut [f64], grad: &[f64], lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
    if theta.len() != grad.len() || state.m.len() != grad.len() {
        return Err(QnodeError::DimensionMismatch {
            expected: theta.len(),
            found: grad.len(),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..grad.len() {
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * grad[i];
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * grad[i] * grad[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    adam: AdamState,
}

impl Optimizer {
    pub fn new(cfg: OptimizerConfig, n_params: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            adam: AdamState::new(n_params),
        })
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64]) -> Result<()> {
        match self.cfg {
            OptimizerConfig::Sgd { lr } => {
                if theta.len() != grad.len() {
                    return Err(QnodeError::DimensionMismatch {
                        expected: theta.len(),
                        found: grad.len(),
                    });
                }
                theta.iter_mut().zip(grad).for_each(|(t, g)| *t -= lr * g);
                Ok(())
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => adam_step(&mut self.adam, theta, grad, lr, beta1, beta2, eps),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    StatePrep,
    HamLearn,
    ObsLearn,
    OdeLearn,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::StatePrep => "state-prep",
            Task::HamLearn => "ham-learn",
            Task::ObsLearn => "obs-learn",
            Task::OdeLearn => "ode-learn",
        })
    }
}

fn default_xi_points() -> usize {
    schrodinger::DEFAULT_XI_POINTS
}
fn default_xi_half_width() -> f64 {
    schrodinger::DEFAULT_XI_HALF_WIDTH
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    /// `θ₁X + θ₂Y + θ₃Z`; only meaningful for state preparation.
    SingleQubit,
    Hydrogen,
    Ising {
        sites: usize,
    },
    TdIsing {
        sites: usize,
        width: usize,
    },
    Custom {
        target: ModelDescription,
        target_theta: Vec<f64>,
        ansatz: ModelDescription,
    },
    /// Decay of the first component of a two-level linear system, learned
    /// through its Schrödingerised dilation.
    Decay {
        rate: f64,
        #[serde(default = "default_xi_points")]
        xi_points: usize,
        #[serde(default = "default_xi_half_width")]
        xi_half_width: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum HorizonSpec {
    Fixed { value: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl HorizonSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            HorizonSpec::Fixed { value } => value > 0.0 && value.is_finite(),
            HorizonSpec::Uniform { lo, hi } => lo > 0.0 && hi >= lo && hi.is_finite(),
        };
        if !ok {
            return Err(QnodeError::InvalidConfig(format!("invalid horizon {self:?}")));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            HorizonSpec::Fixed { value } => value,
            HorizonSpec::Uniform { lo, hi } if hi > lo => rng.random_range(lo..hi),
            HorizonSpec::Uniform { lo, .. } => lo,
        }
    }

    pub fn upper(&self) -> f64 {
        match *self {
            HorizonSpec::Fixed { value } => value,
            HorizonSpec::Uniform { hi, .. } => hi,
        }
    }
}

/// Input states `ρ_i` of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InputSpec {
    Zero,
    Plus,
    /// `|+⟩` per qubit followed by RZ·RY·RX with angles from Uniform(0, 4π).
    RandomRotation,
    /// Fixed per-qubit `[α, β, γ]` applied to `|+⟩`.
    Angles { angles: Vec<[f64; 3]> },
}

impl InputSpec {
    pub fn prepare<R: Rng + ?Sized>(&self, n_qubits: usize, rng: &mut R) -> Result<StateVector> {
        match self {
            InputSpec::Zero => Ok(StateVector::zeros(n_qubits)),
            InputSpec::Plus => Ok(StateVector::plus(n_qubits)),
            InputSpec::RandomRotation => random_input_state(n_qubits, rng),
            InputSpec::Angles { angles } => {
                if angles.len() != n_qubits {
                    return Err(QnodeError::InvalidConfig(format!("{} angle triples for {n_qubits} qubits", angles.len())));
                }
                rotated_plus_state(angles)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub rule: QuadratureRule,
    pub step: f64,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self {
            rule: QuadratureRule::Trapezoid,
            step: 0.1,
        }
    }
}

impl QuadratureSpec {
    pub fn grid(&self, horizon: f64) -> Result<TimeGrid> {
        match self.rule {
            QuadratureRule::Trapezoid => TimeGrid::trapezoid_with_step(horizon, self.step),
            QuadratureRule::Midpoint => TimeGrid::midpoint_with_step(horizon, self.step),
            QuadratureRule::UniformRandom => Err(QnodeError::InvalidConfig(
                "training uses deterministic quadrature (trapezoid or midpoint)".into(),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitSpec {
    Zeros,
    Uniform { lo: f64, hi: f64 },
    Values { values: Vec<f64> },
    /// One `[lo, hi]` uniform range per parameter.
    Ranges { ranges: Vec<[f64; 2]> },
}

/// Weight of each observable record in the mini-batch loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordWeight {
    /// `1/N` per record, as in the tomography loss.
    #[default]
    Mean,
    /// Weight 1 per record.
    Sum,
}

fn default_batch() -> usize {
    1
}
fn default_dataset_size() -> usize {
    100
}
fn default_probes() -> usize {
    50
}
fn default_test_horizon() -> HorizonSpec {
    HorizonSpec::Uniform { lo: 1.0, hi: 2.0 }
}
fn default_eval_every() -> usize {
    1
}
fn default_init() -> InitSpec {
    InitSpec::Zeros
}
fn default_method() -> Method {
    Method::ExactSubstep
}
fn default_exact() -> ShotBudget {
    ShotBudget::Exact
}
fn default_input() -> InputSpec {
    InputSpec::Plus
}
fn default_u0() -> Vec<f64> {
    vec![1.0, 1.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: Task,
    pub model: ModelSpec,
    pub optimizer: OptimizerConfig,
    pub iterations: usize,
    pub horizon: HorizonSpec,
    #[serde(default = "default_exact")]
    pub shots: ShotBudget,
    #[serde(default)]
    pub quadrature: QuadratureSpec,
    #[serde(default = "default_input")]
    pub input: InputSpec,
    /// Target of state preparation.
    #[serde(default = "default_input")]
    pub target_state: InputSpec,
    #[serde(default = "default_batch")]
    pub batch: usize,
    /// Size of the pool that mini-batches are drawn from with replacement.
    #[serde(default = "default_dataset_size")]
    pub dataset_size: usize,
    #[serde(default = "default_probes")]
    pub test_probes: usize,
    #[serde(default = "default_test_horizon")]
    pub test_horizon: HorizonSpec,
    /// Test error is evaluated every this many iterations and at the end.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default = "default_init")]
    pub init: InitSpec,
    #[serde(default = "default_method")]
    pub propagation: Method,
    #[serde(default)]
    pub normalize_gradient: bool,
    #[serde(default)]
    pub record_weight: RecordWeight,
    /// Real initial vector of the linear system (normalised on use).
    #[serde(default = "default_u0")]
    pub ode_u0: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.horizon.validate()?;
        self.test_horizon.validate()?;
        if !(self.quadrature.step > 0.0) {
            return Err(QnodeError::InvalidConfig("quadrature step must be positive".into()));
        }
        if self.batch == 0 || self.dataset_size == 0 || self.test_probes == 0 || self.eval_every == 0 {
            return Err(QnodeError::InvalidConfig("batch, dataset_size, test_probes and eval_every must be ≥ 1".into()));
        }
        let model_ok = match (&self.task, &self.model) {
            (Task::OdeLearn, ModelSpec::Decay { .. }) => true,
            (Task::OdeLearn, _) | (_, ModelSpec::Decay { .. }) => false,
            (Task::StatePrep, _) => true,
            (_, ModelSpec::SingleQubit) => false,
            _ => true,
        };
        if !model_ok {
            return Err(QnodeError::InvalidConfig(format!("model {:?} does not fit task {}", self.model, self.task)));
        }
        Ok(())
    }
}

/// Derived RNG streams of one run, so that changing e.g. the probe count
/// does not perturb the training draws.
const STREAM_MODEL: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_DATA: u64 = 3;
const STREAM_PROBES: u64 = 4;
const STREAM_TRAIN: u64 = 5;

pub fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed of replicate `r` of a run with master seed `seed`.
pub fn replicate_seed(seed: u64, replicate: u64) -> u64 {
    derived_rng(seed, 1000 + replicate).random()
}

fn propagation(method: Method, horizon: f64) -> PropagatorConfig {
    PropagatorConfig::for_horizon(method, horizon)
}

fn evolve_pure<D: crate::evolution::Dynamics + ?Sized>(
    h: &D,
    theta: &[f64],
    input: &StateVector,
    horizon: f64,
    method: Method,
) -> Result<StateVector> {
    match evolve_state(&input.clone().into(), h, theta, 0.0, horizon, &propagation(method, horizon))? {
        QuantumState::Pure(v) => Ok(v),
        QuantumState::Mixed(_) => unreachable!("unitary evolution keeps pure states pure"),
    }
}

/// One input state, its horizon and the black-box output.
#[derive(Clone, Debug)]
pub struct Sample {
    pub input: StateVector,
    pub horizon: f64,
    pub target: StateVector,
}

/// `M` samples `(ρ_i, T_i, σ_i(T_i))` with `σ_i` from exact evolution under
/// the target model.
pub fn generate_hamlearn_dataset<R: Rng + ?Sized>(
    target: &ParametricHamiltonian,
    target_theta: &[f64],
    input: &InputSpec,
    horizon: &HorizonSpec,
    size: usize,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    let n_qubits = target.dims().len();
    (0..size)
        .map(|_| {
            let input = input.prepare(n_qubits, rng)?;
            let t = horizon.sample(rng);
            let target = evolve_pure(target, target_theta, &input, t, Method::ExactSubstep)?;
            Ok(Sample { input, horizon: t, target })
        })
        .collect()
}

/// `1 − (1/M_s) Σ |⟨σ_i|U_θ(T_i)|φ_i⟩|²` over given probes.
pub fn test_error_on(ansatz: &ParametricHamiltonian, theta: &[f64], probes: &[Sample]) -> Result<f64> {
    if probes.is_empty() {
        return Err(QnodeError::InvalidConfig("no test probes".into()));
    }
    let mut fid = 0.0;
    for p in probes {
        let out = evolve_pure(ansatz, theta, &p.input, p.horizon, Method::ExactSubstep)?;
        fid += p.target.amplitudes().dotc(out.amplitudes()).norm_sqr();
    }
    Ok((1.0 - fid / probes.len() as f64).clamp(0.0, 1.0))
}

/// Mean infidelity over `m_s` random rotated `|+⟩` probes with
/// `T ~ Uniform(1, 2)`.
pub fn test_error<R: Rng + ?Sized>(theta: &[f64], model: &Builtin, m_s: usize, rng: &mut R) -> Result<f64> {
    if m_s == 0 {
        return Err(QnodeError::InvalidConfig("M_s must be at least 1".into()));
    }
    let probes = generate_hamlearn_dataset(
        &model.target,
        &model.target_theta,
        &InputSpec::RandomRotation,
        &default_test_horizon(),
        m_s,
        rng,
    )?;
    test_error_on(&model.ansatz, theta, &probes)
}

/// `max_t |f_a(t) − f_b(t)|` on `n` uniform points of `[t0, t1]`.
pub fn schedule_mismatch(a: &Schedule, theta_a: &[f64], b: &Schedule, theta_b: &[f64], t0: f64, t1: f64, n: usize) -> f64 {
    (0..n)
        .map(|i| {
            let t = t0 + (t1 - t0) * i as f64 / (n.max(2) - 1) as f64;
            (a.value(t, theta_a) - b.value(t, theta_b)).abs()
        })
        .fold(0.0, f64::max)
}

/// Window on which learned and true drives are compared.
pub const DRIVE_WINDOW: (f64, f64) = (0.0, 2.0);
const DRIVE_SAMPLES: usize = 401;

/// For time-dependent Ising runs, `(t, f_θ(t), sin(πt))` at `n` evenly
/// spaced times on the drive window; `None` for other models.
pub fn drive_samples(cfg: &ExperimentConfig, theta: &[f64], n: usize) -> Result<Option<Vec<(f64, f64, f64)>>> {
    if !matches!(cfg.model, ModelSpec::TdIsing { .. }) {
        return Ok(None);
    }
    let model = build_model(&cfg.model, &mut derived_rng(cfg.seed, STREAM_MODEL))?;
    model.ansatz.check_theta(theta)?;
    let drive = |h: &ParametricHamiltonian| h.terms().last().map(|t| t.schedule.clone()).expect("drive term");
    let (learned, target) = (drive(&model.ansatz), drive(&model.target));
    let (t0, t1) = DRIVE_WINDOW;
    Ok(Some(
        (0..n)
            .map(|i| {
                let t = t0 + (t1 - t0) * i as f64 / (n.max(2) - 1) as f64;
                (t, learned.value(t, theta), target.value(t, &model.target_theta))
            })
            .collect(),
    ))
}

/// `max |f_θ(t) − sin(πt)|` over the drive window for time-dependent Ising
/// runs; `None` for other models.
pub fn drive_mismatch(cfg: &ExperimentConfig, theta: &[f64]) -> Result<Option<f64>> {
    Ok(drive_samples(cfg, theta, DRIVE_SAMPLES)?.map(|s| s.iter().map(|(_, a, b)| (a - b).abs()).fold(0.0, f64::max)))
}

/// One row of a training curve, taken before the update of that iteration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub theta: Vec<f64>,
    pub loss: f64,
    pub test_error: Option<f64>,
    pub grad_norm: f64,
    pub grad_stderr: Vec<f64>,
    pub elapsed_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainingRun {
    pub task: Task,
    pub records: Vec<IterationRecord>,
    pub final_theta: Vec<f64>,
    pub target_theta: Vec<f64>,
    pub optimizer: OptimizerConfig,
    pub shots: ShotBudget,
    pub wall_time_ms: f64,
}

pub const CSV_HEADER: &str = "iteration,loss,test_error,grad_norm,shots,elapsed_ms";

impl TrainingRun {
    pub fn final_test_error(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.test_error)
    }

    /// Rows in the fixed column order. Timing depends on the machine, so
    /// the `elapsed_ms` column stays empty unless `timing` is set.
    pub fn to_csv(&self, timing: bool) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let test = r.test_error.map(|v| v.to_string()).unwrap_or_default();
            let elapsed = if timing { format!("{:.3}", r.elapsed_ms) } else { String::new() };
            let _ = writeln!(out, "{},{},{},{},{},{}", r.iteration, r.loss, test, r.grad_norm, self.shots, elapsed);
        }
        out
    }
}

/// A model the loop can train, with its loss, gradient and test metric.
enum Problem {
    Unitary {
        model: Builtin,
        dataset: Vec<Sample>,
        probes: Vec<Sample>,
    },
    Ode {
        h: DilatedHamiltonian,
        v0: StateVector,
        records: Vec<CollocationRecord>,
        horizon: f64,
        truth: Vec<f64>,
    },
}

/// Target and ansatz for a non-ODE model spec.
pub fn build_model<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Builtin> {
    match spec {
        ModelSpec::SingleQubit => {
            let ansatz = single_qubit_ansatz();
            Ok(Builtin {
                target: ansatz.clone(),
                target_theta: vec![0.0, std::f64::consts::FRAC_PI_4, 0.0],
                ansatz,
            })
        }
        ModelSpec::Hydrogen => Ok(builtin_hydrogen()),
        ModelSpec::Ising { sites } => builtin_ising(*sites, rng),
        ModelSpec::TdIsing { sites, width } => builtin_td_ising(*sites, *width, rng),
        ModelSpec::Custom {
            target,
            target_theta,
            ansatz,
        } => {
            let target = target.build()?;
            target.check_theta(target_theta)?;
            let ansatz = ansatz.build()?;
            if ansatz.dims() != target.dims() {
                return Err(QnodeError::DimensionMismatch {
                    expected: target.dim(),
                    found: ansatz.dim(),
                });
            }
            Ok(Builtin {
                target,
                target_theta: target_theta.clone(),
                ansatz,
            })
        }
        ModelSpec::Decay { .. } => Err(QnodeError::InvalidConfig("the decay model is trained by ode-learn".into())),
    }
}

fn prepare(cfg: &ExperimentConfig) -> Result<Problem> {
    let mut model_rng = derived_rng(cfg.seed, STREAM_MODEL);
    if let ModelSpec::Decay {
        rate,
        xi_points,
        xi_half_width,
    } = cfg.model
    {
        let HorizonSpec::Fixed { value: horizon } = cfg.horizon else {
            return Err(QnodeError::InvalidConfig("ode-learn needs a fixed horizon".into()));
        };
        let sys = LinearSystem::decay();
        if cfg.ode_u0.len() != sys.dim() {
            return Err(QnodeError::DimensionMismatch {
                expected: sys.dim(),
                found: cfg.ode_u0.len(),
            });
        }
        let u0 = CVec::from_iterator(sys.dim(), cfg.ode_u0.iter().map(|&x| c(x, 0.0)));
        let xi = XiRegister::new(xi_points, xi_half_width)?;
        let truth = vec![rate];
        let u_t = sys.solve(&u0, &truth, horizon, 1)?;
        let obs = basis_projectors(sys.dim());
        let records = obs
            .iter()
            .zip(collocation_values(&u_t, &obs))
            .map(|(o, value)| CollocationRecord {
                observable: o.clone(),
                value,
            })
            .collect();
        return Ok(Problem::Ode {
            h: dilate(&sys, &xi)?,
            v0: dilated_initial_state(&u0, &xi)?,
            records,
            horizon,
            truth,
        });
    }

    let model = build_model(&cfg.model, &mut model_rng)?;
    let n_qubits = model.ansatz.dims().len();
    if cfg.task == Task::StatePrep {
        let HorizonSpec::Fixed { value: horizon } = cfg.horizon else {
            return Err(QnodeError::InvalidConfig("state-prep needs a fixed horizon".into()));
        };
        let mut rng = derived_rng(cfg.seed, STREAM_DATA);
        let sample = Sample {
            input: cfg.input.prepare(n_qubits, &mut rng)?,
            horizon,
            target: cfg.target_state.prepare(n_qubits, &mut rng)?,
        };
        return Ok(Problem::Unitary {
            model,
            probes: vec![sample.clone()],
            dataset: vec![sample],
        });
    }
    let dataset = generate_hamlearn_dataset(
        &model.target,
        &model.target_theta,
        &cfg.input,
        &cfg.horizon,
        cfg.dataset_size,
        &mut derived_rng(cfg.seed, STREAM_DATA),
    )?;
    let probes = generate_hamlearn_dataset(
        &model.target,
        &model.target_theta,
        &InputSpec::RandomRotation,
        &cfg.test_horizon,
        cfg.test_probes,
        &mut derived_rng(cfg.seed, STREAM_PROBES),
    )?;
    Ok(Problem::Unitary { model, dataset, probes })
}

fn init_theta(cfg: &ExperimentConfig, n: usize) -> Result<Vec<f64>> {
    let mut rng = derived_rng(cfg.seed, STREAM_INIT);
    match &cfg.init {
        InitSpec::Zeros => Ok(vec![0.0; n]),
        InitSpec::Uniform { lo, hi } => {
            if !(hi > lo) {
                return Err(QnodeError::InvalidConfig("uniform init needs lo < hi".into()));
            }
            Ok((0..n).map(|_| rng.random_range(*lo..*hi)).collect())
        }
        InitSpec::Values { values } => {
            if values.len() != n {
                return Err(QnodeError::ThetaLength {
                    expected: n,
                    found: values.len(),
                });
            }
            Ok(values.clone())
        }
        InitSpec::Ranges { ranges } => {
            if ranges.len() != n {
                return Err(QnodeError::ThetaLength {
                    expected: n,
                    found: ranges.len(),
                });
            }
            ranges
                .iter()
                .map(|&[lo, hi]| {
                    if hi > lo {
                        Ok(rng.random_range(lo..hi))
                    } else {
                        Err(QnodeError::InvalidConfig(format!("init range [{lo}, {hi}] is empty")))
                    }
                })
                .collect()
        }
    }
}

struct StepOutput {
    loss: f64,
    grad: Vec<f64>,
    stderr: Vec<f64>,
}

fn accumulate(out: &mut StepOutput, values: &[f64], stderr: &[f64]) {
    for i in 0..values.len() {
        out.grad[i] += values[i];
        out.stderr[i] = out.stderr[i].hypot(stderr[i]);
    }
}

/// A uniformly random one-site Pauli on `n` qubits.
fn random_one_site_pauli<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<PauliString> {
    let site = rng.random_range(0..n);
    let letter = [Pauli::X, Pauli::Y, Pauli::Z][rng.random_range(0..3)];
    PauliString::single(n, site, letter)
}

fn gradient_options(method: Method, horizon: f64) -> GradientOptions {
    GradientOptions {
        propagation: propagation(method, horizon),
        backend: RegisterBackend::Auto,
    }
}

fn unitary_step<R: Rng + ?Sized>(
    cfg: &ExperimentConfig,
    model: &Builtin,
    dataset: &[Sample],
    theta: &[f64],
    rng: &mut R,
) -> Result<StepOutput> {
    let h = &model.ansatz;
    let batch: Vec<&Sample> = if cfg.task == Task::StatePrep {
        dataset.iter().collect()
    } else {
        (0..cfg.batch).map(|_| &dataset[rng.random_range(0..dataset.len())]).collect()
    };
    let outputs: Vec<QuantumState> = batch
        .iter()
        .map(|s| evolve_pure(h, theta, &s.input, s.horizon, cfg.propagation).map(QuantumState::from))
        .collect::<Result<_>>()?;

    let (loss, seeds): (f64, Vec<AdjointSeed>) = match cfg.task {
        Task::StatePrep | Task::HamLearn => {
            let targets: Vec<QuantumState> = batch.iter().map(|s| s.target.clone().into()).collect();
            let pairs: Vec<StatePair> = outputs
                .iter()
                .zip(&targets)
                .map(|(model, target)| StatePair { model, target })
                .collect();
            hamlearn_loss_and_seeds(&pairs)?
        }
        Task::ObsLearn => {
            let n_qubits = h.dims().len();
            let records = batch
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let p = random_one_site_pauli(n_qubits, rng)?;
                    let value = crate::loss::expectation_of(&p.matrix(), &s.target.clone().into())?;
                    Ok(ObservableRecord {
                        observable: ObservableSpec::Pauli(p),
                        value,
                        input: i,
                        time: s.horizon,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&QuantumState> = outputs.iter().collect();
            let (loss, seeds) = observable_loss_and_seed(&records, &refs)?;
            match cfg.record_weight {
                RecordWeight::Mean => (loss, seeds),
                RecordWeight::Sum => {
                    let n = records.len() as f64;
                    (loss * n, seeds.into_iter().map(|s| s.scaled(n)).collect())
                }
            }
        }
        Task::OdeLearn => unreachable!("validated"),
    };

    let mut out = StepOutput {
        loss,
        grad: vec![0.0; theta.len()],
        stderr: vec![0.0; theta.len()],
    };
    for (sample, seed) in batch.iter().zip(&seeds) {
        let grid = cfg.quadrature.grid(sample.horizon)?;
        let g = circuit_gradient(
            h,
            theta,
            &sample.input.clone().into(),
            seed,
            &grid,
            cfg.shots,
            rng,
            &gradient_options(cfg.propagation, sample.horizon),
        )?;
        accumulate(&mut out, &g.values, &g.stderr);
    }
    Ok(out)
}

fn ode_step<R: Rng + ?Sized>(
    cfg: &ExperimentConfig,
    h: &DilatedHamiltonian,
    v0: &StateVector,
    records: &[CollocationRecord],
    horizon: f64,
    theta: &[f64],
    rng: &mut R,
) -> Result<StepOutput> {
    let v_t = evolve_pure(h, theta, v0, horizon, cfg.propagation)?;
    let (loss, seed) = schrodinger::ode_loss_and_seed(records, &v_t, h.xi())?;
    let grid = cfg.quadrature.grid(horizon)?;
    let g = circuit_gradient(h, theta, &v0.clone().into(), &seed, &grid, cfg.shots, rng, &gradient_options(cfg.propagation, horizon))?;
    Ok(StepOutput {
        loss,
        grad: g.values,
        stderr: g.stderr,
    })
}

/// Runs the configured experiment. Records are taken at iterations
/// `0..=iterations`; row `i` holds the loss and gradient at the parameters
/// before update `i`, and the last row the final parameters.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainingRun> {
    cfg.validate()?;
    let start = Instant::now();
    let problem = prepare(cfg)?;
    let (n_params, target_theta) = match &problem {
        Problem::Unitary { model, .. } => (model.ansatz.n_params(), model.target_theta.clone()),
        Problem::Ode { truth, .. } => (truth.len(), truth.clone()),
    };
    let mut theta = init_theta(cfg, n_params)?;
    let mut optimizer = Optimizer::new(cfg.optimizer, n_params)?;
    let mut rng = derived_rng(cfg.seed, STREAM_TRAIN);
    let mut records = Vec::with_capacity(cfg.iterations + 1);

    for iteration in 0..=cfg.iterations {
        let step = match &problem {
            Problem::Unitary { model, dataset, .. } => unitary_step(cfg, model, dataset, &theta, &mut rng)?,
            Problem::Ode {
                h,
                v0,
                records,
                horizon,
                ..
            } => ode_step(cfg, h, v0, records, *horizon, &theta, &mut rng)?,
        };
        if !step.loss.is_finite() || step.grad.iter().any(|g| !g.is_finite()) {
            return Err(QnodeError::NonFinite(format!(
                "iteration {iteration}: loss {} gradient {:?} at θ = {:?}",
                step.loss, step.grad, theta
            )));
        }
        let evaluate = iteration % cfg.eval_every == 0 || iteration == cfg.iterations;
        let test_error = if evaluate {
            Some(match &problem {
                Problem::Unitary { model, probes, .. } => test_error_on(&model.ansatz, &theta, probes)?,
                Problem::Ode { truth, .. } => theta.iter().zip(truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max),
            })
        } else {
            None
        };
        let grad_norm = step.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        records.push(IterationRecord {
            iteration,
            theta: theta.clone(),
            loss: step.loss,
            test_error,
            grad_norm,
            grad_stderr: step.stderr,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if iteration == cfg.iterations {
            break;
        }
        let mut grad = step.grad;
        if cfg.normalize_gradient && grad_norm > 0.0 {
            grad.iter_mut().for_each(|g| *g /= grad_norm);
        }
        optimizer.step(&mut theta, &grad)?;
    }

    Ok(TrainingRun {
        task: cfg.task,
        records,
        final_theta: theta,
        target_theta,
        optimizer: cfg.optimizer,
        shots: cfg.shots,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}
