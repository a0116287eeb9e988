//! Parametric Hamiltonians `H(t, θ) = Σ_k f_k(t, θ) H_k` and the built-in
//! models used in the experiments.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::block::{BlockEigen, BlockOp};
use crate::error::{QnodeError, Result};
use crate::linalg::{self, CMat};
use crate::quantum::{HermitianObservable, Pauli, PauliString};

/// Scalar control function `f(t, θ)` reading its own slice of θ.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    /// `θ[index]`.
    Constant { index: usize },
    /// `θ[indices[i]]` on `[breakpoints[i-1], breakpoints[i])`; the first
    /// interval extends to −∞ and the last to +∞.
    PiecewiseConstant {
        breakpoints: Vec<f64>,
        indices: Vec<usize>,
    },
    /// `Σ_n a_n cos((n+1)ωt) + b_n sin((n+1)ωt)`.
    Fourier {
        omega: f64,
        cos_indices: Vec<usize>,
        sin_indices: Vec<usize>,
    },
    /// Two-layer network `Σ_k w2_k sin(w1_k t + b_k) + bias`.
    SinusoidalNetwork {
        w1: Vec<usize>,
        b: Vec<usize>,
        w2: Vec<usize>,
        bias: usize,
    },
}

impl Schedule {
    /// Every θ index read by this schedule, in a fixed order.
    pub fn owned_indices(&self) -> Vec<usize> {
        match self {
            Schedule::Constant { index } => vec![*index],
            Schedule::PiecewiseConstant { indices, .. } => indices.clone(),
            Schedule::Fourier {
                cos_indices,
                sin_indices,
                ..
            } => cos_indices.iter().chain(sin_indices).copied().collect(),
            Schedule::SinusoidalNetwork { w1, b, w2, bias } => w1
                .iter()
                .chain(b)
                .chain(w2)
                .chain(std::iter::once(bias))
                .copied()
                .collect(),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Schedule::Constant { .. })
    }

    pub(crate) fn validate(&self) -> Result<()> {
        match self {
            Schedule::PiecewiseConstant {
                breakpoints,
                indices,
            } => {
                if indices.is_empty() || breakpoints.len() + 1 != indices.len() {
                    return Err(QnodeError::InvalidModel(
                        "piecewise schedule needs one more index than breakpoints".into(),
                    ));
                }
                if breakpoints.windows(2).any(|w| w[0] >= w[1])
                    || breakpoints.iter().any(|b| !b.is_finite())
                {
                    return Err(QnodeError::InvalidModel(
                        "breakpoints must be finite and strictly increasing".into(),
                    ));
                }
            }
            Schedule::Fourier {
                omega,
                cos_indices,
                sin_indices,
            } => {
                if !omega.is_finite() || (cos_indices.is_empty() && sin_indices.is_empty()) {
                    return Err(QnodeError::InvalidModel(
                        "Fourier schedule needs a finite frequency and at least one coefficient"
                            .into(),
                    ));
                }
            }
            Schedule::SinusoidalNetwork { w1, b, w2, .. } => {
                if w1.is_empty() || w1.len() != b.len() || w1.len() != w2.len() {
                    return Err(QnodeError::InvalidModel(
                        "network layers must have equal nonzero width".into(),
                    ));
                }
            }
            Schedule::Constant { .. } => {}
        }
        Ok(())
    }

    fn piece(breakpoints: &[f64], t: f64) -> usize {
        breakpoints.partition_point(|&b| b <= t)
    }

    pub fn value(&self, t: f64, theta: &[f64]) -> f64 {
        match self {
            Schedule::Constant { index } => theta[*index],
            Schedule::PiecewiseConstant {
                breakpoints,
                indices,
            } => theta[indices[Self::piece(breakpoints, t)]],
            Schedule::Fourier {
                omega,
                cos_indices,
                sin_indices,
            } => {
                let mut f = 0.0;
                for (n, &i) in cos_indices.iter().enumerate() {
                    f += theta[i] * ((n + 1) as f64 * omega * t).cos();
                }
                for (n, &i) in sin_indices.iter().enumerate() {
                    f += theta[i] * ((n + 1) as f64 * omega * t).sin();
                }
                f
            }
            Schedule::SinusoidalNetwork { w1, b, w2, bias } => {
                let mut f = theta[*bias];
                for k in 0..w1.len() {
                    f += theta[w2[k]] * (theta[w1[k]] * t + theta[b[k]]).sin();
                }
                f
            }
        }
    }

    /// Sparse `(index, ∂f/∂θ_index)` pairs; indices not listed have zero
    /// derivative.
    pub fn grad(&self, t: f64, theta: &[f64]) -> Vec<(usize, f64)> {
        match self {
            Schedule::Constant { index } => vec![(*index, 1.0)],
            Schedule::PiecewiseConstant {
                breakpoints,
                indices,
            } => vec![(indices[Self::piece(breakpoints, t)], 1.0)],
            Schedule::Fourier {
                omega,
                cos_indices,
                sin_indices,
            } => {
                let mut g = Vec::with_capacity(cos_indices.len() + sin_indices.len());
                for (n, &i) in cos_indices.iter().enumerate() {
                    g.push((i, ((n + 1) as f64 * omega * t).cos()));
                }
                for (n, &i) in sin_indices.iter().enumerate() {
                    g.push((i, ((n + 1) as f64 * omega * t).sin()));
                }
                g
            }
            Schedule::SinusoidalNetwork { w1, b, w2, bias } => {
                let mut g = Vec::with_capacity(3 * w1.len() + 1);
                for k in 0..w1.len() {
                    let arg = theta[w1[k]] * t + theta[b[k]];
                    let (s, co) = arg.sin_cos();
                    g.push((w1[k], theta[w2[k]] * t * co));
                    g.push((b[k], theta[w2[k]] * co));
                    g.push((w2[k], s));
                }
                g.push((*bias, 1.0));
                g
            }
        }
    }

    /// `∂f/∂t`, zero away from breakpoints for piecewise schedules.
    pub fn dt(&self, t: f64, theta: &[f64]) -> f64 {
        match self {
            Schedule::Constant { .. } | Schedule::PiecewiseConstant { .. } => 0.0,
            Schedule::Fourier {
                omega,
                cos_indices,
                sin_indices,
            } => {
                let mut f = 0.0;
                for (n, &i) in cos_indices.iter().enumerate() {
                    let w = (n + 1) as f64 * omega;
                    f -= theta[i] * w * (w * t).sin();
                }
                for (n, &i) in sin_indices.iter().enumerate() {
                    let w = (n + 1) as f64 * omega;
                    f += theta[i] * w * (w * t).cos();
                }
                f
            }
            Schedule::SinusoidalNetwork { w1, b, w2, .. } => (0..w1.len())
                .map(|k| {
                    theta[w2[k]] * theta[w1[k]] * (theta[w1[k]] * t + theta[b[k]]).cos()
                })
                .sum(),
        }
    }
}

/// Real parameter vector.
pub type Theta = Vec<f64>;

#[derive(Clone, Debug)]
pub struct Term {
    pub schedule: Schedule,
    pub operator: HermitianObservable,
    pub label: String,
}

/// `H(t, θ) = Σ_k f_k(t, θ) H_k` with disjoint parameter ownership.
#[derive(Clone, Debug)]
pub struct ParametricHamiltonian {
    terms: Vec<Term>,
    n_params: usize,
    dims: Vec<usize>,
    blocks: Vec<BlockOp>,
    eigen: Vec<OnceLock<BlockEigen>>,
}

impl ParametricHamiltonian {
    pub fn new(terms: Vec<Term>, n_params: usize) -> Result<Self> {
        let Some(first) = terms.first() else {
            return Err(QnodeError::InvalidModel("no terms".into()));
        };
        let dims = first.operator.dims().to_vec();
        let mut owned = BTreeSet::new();
        for (k, term) in terms.iter().enumerate() {
            if term.operator.dims() != dims.as_slice() {
                return Err(QnodeError::DimensionMismatch {
                    expected: first.operator.dim(),
                    found: term.operator.dim(),
                });
            }
            term.schedule.validate()?;
            for i in term.schedule.owned_indices() {
                if i >= n_params {
                    return Err(QnodeError::IndexOutOfRange {
                        index: i,
                        len: n_params,
                    });
                }
                if !owned.insert(i) {
                    return Err(QnodeError::InvalidModel(format!(
                        "parameter {i} is owned by more than one schedule slot"
                    )));
                }
            }
            for other in &terms[..k] {
                if linalg::max_abs_diff(other.operator.matrix(), term.operator.matrix()) < 1e-12 {
                    return Err(QnodeError::InvalidModel(format!(
                        "terms {:?} and {:?} are identical",
                        other.label, term.label
                    )));
                }
            }
        }
        let blocks = terms
            .iter()
            .map(|t| BlockOp::dense(t.operator.matrix().clone()))
            .collect();
        let eigen = terms.iter().map(|_| OnceLock::new()).collect();
        Ok(Self {
            terms,
            n_params,
            dims,
            blocks,
            eigen,
        })
    }

    /// Builds terms from Pauli strings, each with its own schedule.
    pub fn from_paulis(terms: Vec<(PauliString, Schedule)>, n_params: usize) -> Result<Self> {
        let terms = terms
            .into_iter()
            .map(|(p, schedule)| Term {
                label: p.to_string(),
                operator: p.observable(),
                schedule,
            })
            .collect();
        Self::new(terms, n_params)
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_time_independent(&self) -> bool {
        self.terms.iter().all(|t| t.schedule.is_constant())
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params {
            return Err(QnodeError::ThetaLength {
                expected: self.n_params,
                found: theta.len(),
            });
        }
        Ok(())
    }

    pub fn coefficients(&self, t: f64, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        Ok(self.terms.iter().map(|k| k.schedule.value(t, theta)).collect())
    }

    pub fn evaluate(&self, t: f64, theta: &[f64]) -> Result<HermitianObservable> {
        let coeffs = self.coefficients(t, theta)?;
        let d = self.dim();
        let mut m = CMat::zeros(d, d);
        for (f, term) in coeffs.iter().zip(&self.terms) {
            m += term.operator.matrix() * linalg::c(*f, 0.0);
        }
        Ok(HermitianObservable::from_raw(m, self.dims.clone()))
    }

    /// Per-term sparse parameter derivatives of the schedules.
    pub fn schedule_grads(&self, t: f64, theta: &[f64]) -> Result<Vec<Vec<(usize, f64)>>> {
        self.check_theta(theta)?;
        Ok(self.terms.iter().map(|k| k.schedule.grad(t, theta)).collect())
    }

    /// `∂H/∂θ_m = Σ_k (∂f_k/∂θ_m) H_k`.
    pub fn dh_dtheta(&self, t: f64, theta: &[f64], m: usize) -> Result<HermitianObservable> {
        self.check_theta(theta)?;
        if m >= self.n_params {
            return Err(QnodeError::IndexOutOfRange {
                index: m,
                len: self.n_params,
            });
        }
        let d = self.dim();
        let mut out = CMat::zeros(d, d);
        for term in &self.terms {
            for (i, g) in term.schedule.grad(t, theta) {
                if i == m {
                    out += term.operator.matrix() * linalg::c(g, 0.0);
                }
            }
        }
        Ok(HermitianObservable::from_raw(out, self.dims.clone()))
    }

    pub(crate) fn term_block(&self, k: usize) -> &BlockOp {
        &self.blocks[k]
    }

    pub(crate) fn term_eigen(&self, k: usize) -> &BlockEigen {
        self.eigen[k].get_or_init(|| self.blocks[k].eigh())
    }
}

/// A fixed target Hamiltonian (given as a model at known parameters) and a
/// trainable ansatz.
#[derive(Clone, Debug)]
pub struct Builtin {
    pub target: ParametricHamiltonian,
    pub target_theta: Theta,
    pub ansatz: ParametricHamiltonian,
}

pub const HYDROGEN_COEFFICIENTS: [f64; 4] = [0.397936, 0.397936, 0.011280, 0.180931];

fn pauli(s: &str) -> PauliString {
    s.parse().expect("static Pauli label")
}

fn constant_terms(labels: &[String]) -> Vec<(PauliString, Schedule)> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| (pauli(l), Schedule::Constant { index: i }))
        .collect()
}

/// `θ₁X + θ₂Y + θ₃Z` on one qubit.
pub fn single_qubit_ansatz() -> ParametricHamiltonian {
    let labels = ["X", "Y", "Z"].map(String::from);
    ParametricHamiltonian::from_paulis(constant_terms(&labels), 3).expect("valid ansatz")
}

/// Two-qubit hydrogen Hamiltonian on `Z⊗I, I⊗Z, Z⊗Z, X⊗X`.
pub fn builtin_hydrogen() -> Builtin {
    let labels = ["ZI", "IZ", "ZZ", "XX"].map(String::from);
    let ansatz =
        ParametricHamiltonian::from_paulis(constant_terms(&labels), 4).expect("valid ansatz");
    Builtin {
        target: ansatz.clone(),
        target_theta: HYDROGEN_COEFFICIENTS.to_vec(),
        ansatz,
    }
}

fn zz_labels(sites: usize) -> Vec<String> {
    (0..sites - 1)
        .map(|i| {
            (0..sites)
                .map(|q| if q == i || q == i + 1 { 'Z' } else { 'I' })
                .collect()
        })
        .collect()
}

/// Coupling drawn uniformly from `[−0.5, −0.08] ∪ [0.08, 0.5]`.
fn ising_coupling<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    sign * rng.random_range(0.08..=0.5)
}

/// Nearest-neighbour `Σ x_i Z_i Z_{i+1}` chain with random couplings.
pub fn builtin_ising<R: Rng + ?Sized>(sites: usize, rng: &mut R) -> Result<Builtin> {
    if sites < 2 {
        return Err(QnodeError::InvalidModel("Ising chain needs at least 2 sites".into()));
    }
    let ansatz = ParametricHamiltonian::from_paulis(constant_terms(&zz_labels(sites)), sites - 1)?;
    let target_theta = (0..sites - 1).map(|_| ising_coupling(rng)).collect();
    Ok(Builtin {
        target: ansatz.clone(),
        target_theta,
        ansatz,
    })
}

fn transverse_field(sites: usize) -> HermitianObservable {
    let d = 1usize << sites;
    let mut m = CMat::zeros(d, d);
    for q in 0..sites {
        m += PauliString::single(sites, q, Pauli::X)
            .expect("site in range")
            .matrix();
    }
    HermitianObservable::new(m, vec![2; sites]).expect("sum of Paulis is Hermitian")
}

/// Parameter layout of the time-dependent Ising ansatz: couplings first,
/// then `w1`, `b`, `w2` (each of width `m`) and the bias.
pub fn td_ising_network(sites: usize, width: usize) -> Schedule {
    let base = sites - 1;
    Schedule::SinusoidalNetwork {
        w1: (base..base + width).collect(),
        b: (base + width..base + 2 * width).collect(),
        w2: (base + 2 * width..base + 3 * width).collect(),
        bias: base + 3 * width,
    }
}

/// Ising chain with transverse drive `sin(πt) Σ X_i`; the ansatz learns
/// the drive with a sinusoidal network of width `width`.
pub fn builtin_td_ising<R: Rng + ?Sized>(sites: usize, width: usize, rng: &mut R) -> Result<Builtin> {
    if sites < 2 || width < 1 {
        return Err(QnodeError::InvalidModel(
            "time-dependent Ising needs at least 2 sites and network width 1".into(),
        ));
    }
    let couplings = sites - 1;
    let zz: Vec<Term> = zz_labels(sites)
        .into_iter()
        .enumerate()
        .map(|(i, label)| Term {
            operator: pauli(&label).observable(),
            schedule: Schedule::Constant { index: i },
            label,
        })
        .collect();
    let drive = |schedule| Term {
        schedule,
        operator: transverse_field(sites),
        label: "sum X".into(),
    };

    let mut target_terms = zz.clone();
    target_terms.push(drive(Schedule::Fourier {
        omega: PI,
        cos_indices: vec![],
        sin_indices: vec![couplings],
    }));
    let target = ParametricHamiltonian::new(target_terms, couplings + 1)?;
    let mut target_theta: Theta = (0..couplings).map(|_| ising_coupling(rng)).collect();
    target_theta.push(1.0);

    let mut ansatz_terms = zz;
    ansatz_terms.push(drive(td_ising_network(sites, width)));
    let ansatz = ParametricHamiltonian::new(ansatz_terms, couplings + 3 * width + 1)?;
    Ok(Builtin {
        target,
        target_theta,
        ansatz,
    })
}

/// JSON form of a model: each term is a sum of (optionally weighted) Pauli
/// strings such as `"0.5*XZ"`, driven by one schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDescription {
    pub n_params: usize,
    pub terms: Vec<TermDescription>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermDescription {
    pub paulis: Vec<String>,
    pub schedule: Schedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl ModelDescription {
    pub fn build(&self) -> Result<ParametricHamiltonian> {
        let terms = self
            .terms
            .iter()
            .map(|t| {
                let strings = t
                    .paulis
                    .iter()
                    .map(|p| p.parse::<PauliString>())
                    .collect::<Result<Vec<_>>>()?;
                let Some(first) = strings.first() else {
                    return Err(QnodeError::InvalidModel("term without Pauli strings".into()));
                };
                let n = first.n_qubits();
                if let Some(bad) = strings.iter().find(|p| p.n_qubits() != n) {
                    return Err(QnodeError::InvalidModel(format!("{bad} does not act on {n} qubits")));
                }
                let mut m = CMat::zeros(1 << n, 1 << n);
                for p in &strings {
                    m += p.matrix();
                }
                Ok(Term {
                    schedule: t.schedule.clone(),
                    operator: HermitianObservable::new(m, vec![2; n])?,
                    label: t.label.clone().unwrap_or_else(|| t.paulis.join("+")),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        ParametricHamiltonian::new(terms, self.n_params)
    }
}
