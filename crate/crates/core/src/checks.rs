//! Self-checks behind the `grad-check` and `scaling-study` commands:
//! circuit gradient vs exact adjoint integral vs finite differences, and
//! empirical convergence rates in shots and grid size.

use rand::Rng;
use serde::Serialize;

use crate::adjoint::{adjoint_oracle_gradient, circuit_gradient, AdjointSeed, GradientOptions, QuadratureRule, ShotBudget, TimeGrid};
use crate::error::Result;
use crate::evolution::{evolve_state, PropagatorConfig};
use crate::hamiltonian::{single_qubit_ansatz, ParametricHamiltonian, Schedule};
use crate::loss::{
    hamlearn_loss_and_seeds, observable_loss_and_seed, purity_loss_and_seed, stateprep_loss_and_seed, ObservableRecord, ObservableSpec,
    StatePair,
};
use crate::quantum::{Pauli, PauliString, QuantumState, StateVector};
use crate::sampling::random_pure;
use crate::stats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossFamily {
    StatePrep,
    HamLearn,
    Observable,
    Purity,
}

pub const LOSS_FAMILIES: [LossFamily; 4] = [LossFamily::StatePrep, LossFamily::HamLearn, LossFamily::Observable, LossFamily::Purity];

/// Random Pauli model with `n_terms` distinct strings; all constant except
/// the last, which carries a one-harmonic Fourier schedule.
pub fn random_pauli_model<R: Rng + ?Sized>(n_qubits: usize, n_terms: usize, rng: &mut R) -> Result<ParametricHamiltonian> {
    if n_terms == 0 || n_terms >= 1 << (2 * n_qubits) {
        return Err(crate::QnodeError::InvalidModel(format!("{n_qubits} qubits cannot hold {n_terms} distinct Pauli terms")));
    }
    let mut strings: Vec<PauliString> = Vec::with_capacity(n_terms);
    while strings.len() < n_terms {
        let letters: Vec<Pauli> = (0..n_qubits).map(|_| [Pauli::I, Pauli::X, Pauli::Y, Pauli::Z][rng.random_range(0..4)]).collect();
        let p = PauliString::new(letters, 1.0)?;
        if p.weight() > 0 && !strings.contains(&p) {
            strings.push(p);
        }
    }
    let mut terms = Vec::with_capacity(n_terms);
    let mut next = 0;
    for (k, p) in strings.into_iter().enumerate() {
        let schedule = if k + 1 == n_terms {
            next += 2;
            Schedule::Fourier {
                omega: rng.random_range(0.5..3.0),
                cos_indices: vec![next - 2],
                sin_indices: vec![next - 1],
            }
        } else {
            next += 1;
            Schedule::Constant { index: next - 1 }
        };
        terms.push((p, schedule));
    }
    ParametricHamiltonian::from_paulis(terms, next)
}

type LossEval = Box<dyn Fn(&[QuantumState]) -> Result<(f64, Vec<AdjointSeed>)>>;

/// One loss evaluation with its seed per initial state.
struct Case {
    inputs: Vec<QuantumState>,
    horizons: Vec<f64>,
    /// Loss as a function of the final states, plus one seed per input.
    eval: LossEval,
}

fn random_case<R: Rng + ?Sized>(family: LossFamily, dims: &[usize], rng: &mut R) -> Result<Case> {
    let n = dims.len();
    let state = |rng: &mut R| QuantumState::from(random_pure(dims, rng));
    let horizon = |rng: &mut R| rng.random_range(0.5..1.5);
    match family {
        LossFamily::StatePrep => {
            let target = state(rng);
            Ok(Case {
                inputs: vec![state(rng)],
                horizons: vec![horizon(rng)],
                eval: Box::new(move |out| {
                    let (l, s) = stateprep_loss_and_seed(&out[0], &target)?;
                    Ok((l, vec![s]))
                }),
            })
        }
        LossFamily::HamLearn => {
            let targets = vec![state(rng), state(rng)];
            Ok(Case {
                inputs: vec![state(rng), state(rng)],
                horizons: vec![horizon(rng), horizon(rng)],
                eval: Box::new(move |out| {
                    let pairs: Vec<StatePair> = out.iter().zip(&targets).map(|(model, target)| StatePair { model, target }).collect();
                    hamlearn_loss_and_seeds(&pairs)
                }),
            })
        }
        LossFamily::Observable => {
            let records: Vec<ObservableRecord> = (0..2)
                .map(|i| {
                    let p = loop {
                        let letters: Vec<Pauli> = (0..n).map(|_| [Pauli::I, Pauli::X, Pauli::Y, Pauli::Z][rng.random_range(0..4)]).collect();
                        let p = PauliString::new(letters, 1.0)?;
                        if p.weight() > 0 {
                            break p;
                        }
                    };
                    Ok(ObservableRecord {
                        observable: ObservableSpec::Pauli(p),
                        value: rng.random_range(-1.0..1.0),
                        input: i,
                        time: 0.0,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(Case {
                inputs: vec![state(rng), state(rng)],
                horizons: vec![horizon(rng), horizon(rng)],
                eval: Box::new(move |out| {
                    let refs: Vec<&QuantumState> = out.iter().collect();
                    observable_loss_and_seed(&records, &refs)
                }),
            })
        }
        LossFamily::Purity => Ok(Case {
            inputs: vec![state(rng)],
            horizons: vec![horizon(rng)],
            eval: Box::new(move |out| {
                let (l, s) = purity_loss_and_seed(&out[0].to_density(), 2)?;
                Ok((l, vec![s]))
            }),
        }),
    }
}

fn final_states(h: &ParametricHamiltonian, theta: &[f64], case: &Case) -> Result<Vec<QuantumState>> {
    case.inputs
        .iter()
        .zip(&case.horizons)
        .map(|(rho0, &t)| evolve_state(rho0, h, theta, 0.0, t, &PropagatorConfig::exact(t)))
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckInstance {
    pub family: LossFamily,
    pub n_qubits: usize,
    pub theta: Vec<f64>,
    pub circuit: Vec<f64>,
    pub oracle: Vec<f64>,
    pub finite_difference: Vec<f64>,
    pub circuit_vs_oracle: f64,
    pub circuit_vs_fd: f64,
    pub oracle_vs_fd: f64,
    pub pass: bool,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct GradCheckSettings {
    pub grid_points: usize,
    pub fd_step: f64,
    pub tolerance: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            grid_points: 1001,
            fd_step: 1e-5,
            tolerance: 1e-5,
        }
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Circuit gradient (exact shots, trapezoid), exact adjoint integral on the
/// same grid, and central finite differences of the loss, for one random
/// model and loss.
pub fn grad_check_instance<R: Rng + ?Sized>(
    family: LossFamily,
    n_qubits: usize,
    settings: &GradCheckSettings,
    rng: &mut R,
) -> Result<GradCheckInstance> {
    // purity needs an ancilla qubit on top of the system
    let n_qubits = if family == LossFamily::Purity { n_qubits.max(2) } else { n_qubits };
    let n_terms = rng.random_range(2..=4).min((1 << (2 * n_qubits)) - 1);
    let h = random_pauli_model(n_qubits, n_terms, rng)?;
    let theta: Vec<f64> = (0..h.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let case = random_case(family, h.dims(), rng)?;
    check_case(family, &h, theta, &case, settings, rng)
}

/// The single-qubit state preparation problem (`|0⟩ → |+⟩` at `T = 1`)
/// checked at a given `θ`.
pub fn state_prep_check<R: Rng + ?Sized>(theta: &[f64], settings: &GradCheckSettings, rng: &mut R) -> Result<GradCheckInstance> {
    let h = single_qubit_ansatz();
    let target: QuantumState = StateVector::plus(1).into();
    let case = Case {
        inputs: vec![StateVector::zeros(1).into()],
        horizons: vec![1.0],
        eval: Box::new(move |out| {
            let (l, s) = stateprep_loss_and_seed(&out[0], &target)?;
            Ok((l, vec![s]))
        }),
    };
    check_case(LossFamily::StatePrep, &h, theta.to_vec(), &case, settings, rng)
}

fn check_case<R: Rng + ?Sized>(
    family: LossFamily,
    h: &ParametricHamiltonian,
    theta: Vec<f64>,
    case: &Case,
    settings: &GradCheckSettings,
    rng: &mut R,
) -> Result<GradCheckInstance> {
    h.check_theta(&theta)?;
    let (_, seeds) = (case.eval)(&final_states(h, &theta, case)?)?;
    let mut circuit = vec![0.0; theta.len()];
    let mut oracle = vec![0.0; theta.len()];
    for ((rho0, &t), seed) in case.inputs.iter().zip(&case.horizons).zip(&seeds) {
        let grid = TimeGrid::trapezoid(t, settings.grid_points - 1)?;
        let opts = GradientOptions::exact(t);
        let g = circuit_gradient(h, &theta, rho0, seed, &grid, ShotBudget::Exact, rng, &opts)?;
        let o = adjoint_oracle_gradient(h, &theta, rho0, seed, &grid, &opts)?;
        for m in 0..theta.len() {
            circuit[m] += g.values[m];
            oracle[m] += o.values[m];
        }
    }
    let mut fd = vec![0.0; theta.len()];
    for m in 0..theta.len() {
        let mut plus = theta.clone();
        let mut minus = theta.clone();
        plus[m] += settings.fd_step;
        minus[m] -= settings.fd_step;
        let lp = (case.eval)(&final_states(h, &plus, case)?)?.0;
        let lm = (case.eval)(&final_states(h, &minus, case)?)?.0;
        fd[m] = (lp - lm) / (2.0 * settings.fd_step);
    }
    let (co, cf, of) = (max_diff(&circuit, &oracle), max_diff(&circuit, &fd), max_diff(&oracle, &fd));
    Ok(GradCheckInstance {
        family,
        n_qubits: h.dims().len(),
        theta,
        pass: co.max(cf).max(of) <= settings.tolerance,
        circuit,
        oracle,
        finite_difference: fd,
        circuit_vs_oracle: co,
        circuit_vs_fd: cf,
        oracle_vs_fd: of,
    })
}

/// `count` instances cycling through the loss families and 1–3 qubits.
pub fn grad_check_suite<R: Rng + ?Sized>(count: usize, settings: &GradCheckSettings, rng: &mut R) -> Result<Vec<GradCheckInstance>> {
    (0..count)
        .map(|i| grad_check_instance(LOSS_FAMILIES[i % LOSS_FAMILIES.len()], 1 + (i / LOSS_FAMILIES.len()) % 3, settings, rng))
        .collect()
}

/// A log-log sweep with its fitted slope.
#[derive(Clone, Debug, Serialize)]
pub struct ScalingSeries {
    pub label: String,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub slope: f64,
}

impl ScalingSeries {
    fn new(label: impl Into<String>, x: Vec<f64>, y: Vec<f64>) -> Self {
        let slope = stats::loglog_slope(&x, &y);
        Self {
            label: label.into(),
            x,
            y,
            slope,
        }
    }
}

/// Single-qubit state preparation at a random `θ`, the instance behind both
/// scaling studies.
fn scaling_instance<R: Rng + ?Sized>(rng: &mut R) -> Result<(ParametricHamiltonian, Vec<f64>, QuantumState, AdjointSeed)> {
    let h = random_pauli_model(1, 3, rng)?;
    let theta: Vec<f64> = (0..h.n_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rho0 = QuantumState::from(random_pure(&[2], rng));
    let target = QuantumState::from(random_pure(&[2], rng));
    let out = evolve_state(&rho0, &h, &theta, 0.0, 1.0, &PropagatorConfig::exact(1.0))?;
    let (_, seed) = stateprep_loss_and_seed(&out, &target)?;
    Ok((h, theta, rho0, seed))
}

/// Empirical standard deviation of each gradient component over `repeats`
/// estimates at each shot count (trapezoid, Δs = 0.1, T = 1).
pub fn shot_scaling<R: Rng + ?Sized>(shots: &[u64], repeats: usize, rng: &mut R) -> Result<Vec<ScalingSeries>> {
    let (h, theta, rho0, seed) = scaling_instance(rng)?;
    let grid = TimeGrid::trapezoid_with_step(1.0, 0.1)?;
    let opts = GradientOptions::exact(1.0);
    let mut spread = vec![Vec::with_capacity(shots.len()); theta.len()];
    for &n in shots {
        let budget = ShotBudget::shots(n)?;
        let samples: Vec<Vec<f64>> = (0..repeats)
            .map(|_| circuit_gradient(&h, &theta, &rho0, &seed, &grid, budget, rng, &opts).map(|g| g.values))
            .collect::<Result<_>>()?;
        for (m, s) in spread.iter_mut().enumerate() {
            let col: Vec<f64> = samples.iter().map(|g| g[m]).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (col.len() - 1) as f64;
            s.push(var.sqrt());
        }
    }
    let x: Vec<f64> = shots.iter().map(|&n| n as f64).collect();
    Ok(spread
        .into_iter()
        .enumerate()
        .map(|(m, y)| ScalingSeries::new(format!("component {m}"), x.clone(), y))
        .collect())
}

/// Error of the exact-shot gradient against a 2^14-interval trapezoid
/// reference as the grid is refined.
pub fn quadrature_scaling<R: Rng + ?Sized>(intervals: &[usize], rng: &mut R) -> Result<Vec<ScalingSeries>> {
    let (h, theta, rho0, seed) = scaling_instance(rng)?;
    let opts = GradientOptions::exact(1.0);
    let reference = adjoint_oracle_gradient(&h, &theta, &rho0, &seed, &TimeGrid::trapezoid(1.0, 1 << 14)?, &opts)?.values;
    let mut out = Vec::new();
    for rule in [QuadratureRule::Trapezoid, QuadratureRule::Midpoint] {
        let mut errors = Vec::with_capacity(intervals.len());
        for &n in intervals {
            let grid = match rule {
                QuadratureRule::Trapezoid => TimeGrid::trapezoid(1.0, n)?,
                _ => TimeGrid::midpoint(1.0, n)?,
            };
            let g = circuit_gradient(&h, &theta, &rho0, &seed, &grid, ShotBudget::Exact, rng, &opts)?.values;
            errors.push(g.iter().zip(&reference).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        }
        out.push(ScalingSeries::new(rule.to_string(), intervals.iter().map(|&n| n as f64).collect(), errors));
    }
    Ok(out)
}
