//! States, observables and the small amount of Pauli algebra the gradient
//! circuits need.
//!
//! Subsystems are ordered left to right with the leftmost factor as the
//! slowest-varying index. Extended registers are always laid out as
//! `ancilla ⊗ adjoint ⊗ original`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::Rng;

use crate::error::{QnodeError, Result};
use crate::linalg::{self, c, eigh, kron, CMat, CVec, ONE, ZERO};

/// Norm tolerance for pure states.
pub const NORM_TOL: f64 = 1e-10;
/// Hermiticity and trace tolerance for density matrices and observables.
pub const HERMITIAN_TOL: f64 = 1e-10;
/// Smallest admissible eigenvalue of a density matrix.
pub const PSD_TOL: f64 = -1e-9;

fn dims_product(dims: &[usize]) -> usize {
    dims.iter().product()
}

fn check_dims(dims: &[usize], len: usize) -> Result<()> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(QnodeError::InvalidState(format!("bad subsystem dims {dims:?}")));
    }
    if dims_product(dims) != len {
        return Err(QnodeError::DimensionMismatch {
            expected: dims_product(dims),
            found: len,
        });
    }
    Ok(())
}

/// Pure state of a composite register.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    amps: CVec,
    dims: Vec<usize>,
}

impl StateVector {
    pub fn new(amps: CVec, dims: Vec<usize>) -> Result<Self> {
        check_dims(&dims, amps.len())?;
        let norm = amps.norm();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(QnodeError::InvalidState(format!("norm {norm} is not 1")));
        }
        Ok(Self { amps, dims })
    }

    /// Normalises `amps` before validating.
    pub fn normalized(amps: CVec, dims: Vec<usize>) -> Result<Self> {
        let norm = amps.norm();
        if !(norm > 1e-300) || !norm.is_finite() {
            return Err(QnodeError::InvalidState("cannot normalise a zero vector".into()));
        }
        Self::new(amps / c(norm, 0.0), dims)
    }

    pub fn qubits(amps: CVec) -> Result<Self> {
        let n = amps.len().trailing_zeros() as usize;
        if 1usize << n != amps.len() {
            return Err(QnodeError::InvalidState(format!(
                "length {} is not a power of two",
                amps.len()
            )));
        }
        Self::new(amps, vec![2; n.max(1)])
    }

    pub fn basis(dims: Vec<usize>, index: usize) -> Result<Self> {
        let d = dims_product(&dims);
        if index >= d {
            return Err(QnodeError::IndexOutOfRange { index, len: d });
        }
        let mut amps = CVec::zeros(d);
        amps[index] = ONE;
        Self::new(amps, dims)
    }

    pub fn zeros(n_qubits: usize) -> Self {
        Self::basis(vec![2; n_qubits], 0).expect("valid basis state")
    }

    /// `|+⟩^{⊗n}`.
    pub fn plus(n_qubits: usize) -> Self {
        let d = 1usize << n_qubits;
        let amp = c(1.0 / (d as f64).sqrt(), 0.0);
        Self {
            amps: CVec::from_element(d, amp),
            dims: vec![2; n_qubits],
        }
    }

    pub(crate) fn from_raw(amps: CVec, dims: Vec<usize>) -> Self {
        debug_assert_eq!(dims_product(&dims), amps.len());
        Self { amps, dims }
    }

    pub fn amplitudes(&self) -> &CVec {
        &self.amps
    }

    pub fn into_amplitudes(self) -> CVec {
        self.amps
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn tensor(&self, other: &StateVector) -> StateVector {
        let mut dims = self.dims.clone();
        dims.extend_from_slice(&other.dims);
        Self::from_raw(linalg::kron_vec(&self.amps, &other.amps), dims)
    }

    pub fn to_density(&self) -> DensityMatrix {
        DensityMatrix::from_raw(linalg::outer(&self.amps, &self.amps), self.dims.clone())
    }
}

/// Mixed state: Hermitian, unit trace, positive semidefinite.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix {
    mat: CMat,
    dims: Vec<usize>,
}

impl DensityMatrix {
    pub fn new(mat: CMat, dims: Vec<usize>) -> Result<Self> {
        validate_density(&mat, &dims)?;
        Ok(Self { mat, dims })
    }

    pub fn pure(state: &StateVector) -> Self {
        state.to_density()
    }

    pub fn maximally_mixed(dims: Vec<usize>) -> Self {
        let d = dims_product(&dims);
        Self::from_raw(CMat::identity(d, d) / c(d as f64, 0.0), dims)
    }

    /// Trusted constructor for outputs of unitary maps and partial traces.
    pub(crate) fn from_raw(mat: CMat, dims: Vec<usize>) -> Self {
        debug_assert_eq!(mat.nrows(), dims_product(&dims));
        Self { mat, dims }
    }

    pub fn matrix(&self) -> &CMat {
        &self.mat
    }

    pub fn into_matrix(self) -> CMat {
        self.mat
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn trace(&self) -> f64 {
        linalg::trace(&self.mat).re
    }

    /// `tr(ρ²)`.
    pub fn purity(&self) -> f64 {
        linalg::trace_product(&self.mat, &self.mat).re
    }

    pub fn tensor(&self, other: &DensityMatrix) -> DensityMatrix {
        let mut dims = self.dims.clone();
        dims.extend_from_slice(&other.dims);
        Self::from_raw(kron(&self.mat, &other.mat), dims)
    }

    /// Spectral decomposition into an ensemble of pure states, dropping
    /// weights below `cutoff`.
    pub fn ensemble(&self, cutoff: f64) -> Vec<(f64, StateVector)> {
        let (vals, vecs) = eigh(&self.mat);
        let mut out = Vec::new();
        for (j, &w) in vals.iter().enumerate() {
            if w > cutoff {
                let col = vecs.column(j).into_owned();
                out.push((w, StateVector::from_raw(col, self.dims.clone())));
            }
        }
        out
    }

    /// Returns the vector when the state has rank one (within `tol`).
    pub fn as_pure(&self, tol: f64) -> Option<StateVector> {
        if (self.purity() - 1.0).abs() > tol {
            return None;
        }
        self.ensemble(0.5).into_iter().next().map(|(_, v)| v)
    }
}

pub fn validate_density(mat: &CMat, dims: &[usize]) -> Result<()> {
    if !mat.is_square() {
        return Err(QnodeError::InvalidState("density matrix is not square".into()));
    }
    check_dims(dims, mat.nrows())?;
    let defect = linalg::hermiticity_defect(mat);
    if defect > HERMITIAN_TOL {
        return Err(QnodeError::NotHermitian(defect));
    }
    let tr = linalg::trace(mat).re;
    if (tr - 1.0).abs() > HERMITIAN_TOL {
        return Err(QnodeError::InvalidState(format!("trace {tr} is not 1")));
    }
    let (vals, _) = eigh(mat);
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < PSD_TOL {
        return Err(QnodeError::InvalidState(format!(
            "negative eigenvalue {min:e}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Spectral {
    pub values: DVector<f64>,
    pub vectors: CMat,
}

/// Hermitian operator with a lazily cached eigendecomposition.
#[derive(Clone, Debug)]
pub struct HermitianObservable {
    mat: CMat,
    dims: Vec<usize>,
    spectral: OnceLock<Spectral>,
}

impl PartialEq for HermitianObservable {
    fn eq(&self, other: &Self) -> bool {
        self.mat == other.mat && self.dims == other.dims
    }
}

impl HermitianObservable {
    pub fn new(mat: CMat, dims: Vec<usize>) -> Result<Self> {
        if !mat.is_square() {
            return Err(QnodeError::InvalidState("observable is not square".into()));
        }
        check_dims(&dims, mat.nrows())?;
        let defect = linalg::hermiticity_defect(&mat);
        if defect > HERMITIAN_TOL {
            return Err(QnodeError::NotHermitian(defect));
        }
        Ok(Self::from_raw(mat, dims))
    }

    pub(crate) fn from_raw(mat: CMat, dims: Vec<usize>) -> Self {
        Self {
            mat,
            dims,
            spectral: OnceLock::new(),
        }
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let d = dims_product(&dims);
        Self::from_raw(CMat::zeros(d, d), dims)
    }

    pub fn identity(dims: Vec<usize>) -> Self {
        let d = dims_product(&dims);
        Self::from_raw(CMat::identity(d, d), dims)
    }

    pub fn matrix(&self) -> &CMat {
        &self.mat
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn spectral(&self) -> &Spectral {
        self.spectral.get_or_init(|| {
            let (values, vectors) = eigh(&self.mat);
            Spectral { values, vectors }
        })
    }

    /// Largest eigenvalue modulus.
    pub fn operator_norm(&self) -> f64 {
        self.spectral()
            .values
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::from_raw(&self.mat * c(factor, 0.0), self.dims.clone())
    }

    pub fn tensor(&self, other: &HermitianObservable) -> Self {
        let mut dims = self.dims.clone();
        dims.extend_from_slice(&other.dims);
        Self::from_raw(kron(&self.mat, &other.mat), dims)
    }

    pub fn apply(&self, v: &CVec) -> CVec {
        &self.mat * v
    }
}

/// Either kind of state; pure inputs are kept as vectors so propagation
/// stays cheap.
#[derive(Clone, Debug, PartialEq)]
pub enum QuantumState {
    Pure(StateVector),
    Mixed(DensityMatrix),
}

impl QuantumState {
    pub fn dim(&self) -> usize {
        match self {
            QuantumState::Pure(s) => s.dim(),
            QuantumState::Mixed(r) => r.dim(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        match self {
            QuantumState::Pure(s) => s.dims(),
            QuantumState::Mixed(r) => r.dims(),
        }
    }

    pub fn to_density(&self) -> DensityMatrix {
        match self {
            QuantumState::Pure(s) => s.to_density(),
            QuantumState::Mixed(r) => r.clone(),
        }
    }
}

impl From<StateVector> for QuantumState {
    fn from(s: StateVector) -> Self {
        QuantumState::Pure(s)
    }
}

impl From<DensityMatrix> for QuantumState {
    fn from(r: DensityMatrix) -> Self {
        QuantumState::Mixed(r)
    }
}

/// Operand of [`tensor`].
#[derive(Clone, Debug)]
pub enum Operand {
    State(StateVector),
    Density(DensityMatrix),
    Observable(HermitianObservable),
}

/// Kronecker product of two states or two operators.
pub fn tensor(a: &Operand, b: &Operand) -> Result<Operand> {
    use Operand::*;
    Ok(match (a, b) {
        (State(x), State(y)) => State(x.tensor(y)),
        (Density(x), Density(y)) => Density(x.tensor(y)),
        (Observable(x), Observable(y)) => Observable(x.tensor(y)),
        (Density(x), Observable(y)) => Observable(
            HermitianObservable::from_raw(x.mat.clone(), x.dims.clone()).tensor(y),
        ),
        (Observable(x), Density(y)) => {
            Observable(x.tensor(&HermitianObservable::from_raw(y.mat.clone(), y.dims.clone())))
        }
        _ => return Err(QnodeError::MixedOperands),
    })
}

/// Index table mapping (kept index, traced index) to the full index.
fn partial_trace_table(dims: &[usize], keep: &[usize]) -> (usize, usize, Vec<usize>) {
    let n = dims.len();
    let mut strides = vec![1usize; n];
    for s in (0..n.saturating_sub(1)).rev() {
        strides[s] = strides[s + 1] * dims[s + 1];
    }
    let traced: Vec<usize> = (0..n).filter(|s| !keep.contains(s)).collect();
    let d_keep: usize = keep.iter().map(|&s| dims[s]).product();
    let d_tr: usize = traced.iter().map(|&s| dims[s]).product();

    let offsets = |subs: &[usize], mut idx: usize| -> usize {
        let mut off = 0;
        for &s in subs.iter().rev() {
            off += (idx % dims[s]) * strides[s];
            idx /= dims[s];
        }
        off
    };
    let keep_off: Vec<usize> = (0..d_keep).map(|k| offsets(keep, k)).collect();
    let tr_off: Vec<usize> = (0..d_tr).map(|t| offsets(&traced, t)).collect();
    let mut table = Vec::with_capacity(d_keep * d_tr);
    for &ko in &keep_off {
        for &to in &tr_off {
            table.push(ko + to);
        }
    }
    (d_keep, d_tr, table)
}

fn normalize_keep(dims: &[usize], keep: &[usize]) -> Result<Vec<usize>> {
    if keep.is_empty() {
        return Err(QnodeError::InvalidSubsystems("keep set is empty".into()));
    }
    let mut keep: Vec<usize> = keep.to_vec();
    keep.sort_unstable();
    keep.dedup();
    if let Some(&bad) = keep.iter().find(|&&s| s >= dims.len()) {
        return Err(QnodeError::IndexOutOfRange {
            index: bad,
            len: dims.len(),
        });
    }
    Ok(keep)
}

/// Partial trace of an arbitrary operator over the subsystems not in `keep`.
pub fn partial_trace_matrix(mat: &CMat, dims: &[usize], keep: &[usize]) -> Result<CMat> {
    check_dims(dims, mat.nrows())?;
    let keep = normalize_keep(dims, keep)?;
    let (d_keep, d_tr, table) = partial_trace_table(dims, &keep);
    let mut out = CMat::zeros(d_keep, d_keep);
    for i in 0..d_keep {
        for j in 0..d_keep {
            let mut acc = ZERO;
            for t in 0..d_tr {
                acc += mat[(table[i * d_tr + t], table[j * d_tr + t])];
            }
            out[(i, j)] = acc;
        }
    }
    Ok(out)
}

/// Reduced state on the subsystems listed in `keep`.
pub fn partial_trace(rho: &DensityMatrix, keep: &[usize]) -> Result<DensityMatrix> {
    let keep_sorted = normalize_keep(&rho.dims, keep)?;
    let mat = partial_trace_matrix(&rho.mat, &rho.dims, &keep_sorted)?;
    let dims = keep_sorted.iter().map(|&s| rho.dims[s]).collect();
    Ok(DensityMatrix::from_raw(mat, dims))
}

/// `tr(O ρ)`.
pub fn expectation(obs: &HermitianObservable, rho: &DensityMatrix) -> Result<f64> {
    if obs.dim() != rho.dim() {
        return Err(QnodeError::DimensionMismatch {
            expected: obs.dim(),
            found: rho.dim(),
        });
    }
    let value = linalg::trace_product(&obs.mat, &rho.mat);
    if value.im.abs() > 1e-9 * (1.0 + value.re.abs()) {
        return Err(QnodeError::NonFinite(format!(
            "expectation has imaginary part {:e}",
            value.im
        )));
    }
    Ok(value.re)
}

/// `⟨ψ|O|ψ⟩`.
pub fn expectation_pure(obs: &HermitianObservable, psi: &StateVector) -> Result<f64> {
    if obs.dim() != psi.dim() {
        return Err(QnodeError::DimensionMismatch {
            expected: obs.dim(),
            found: psi.dim(),
        });
    }
    Ok(psi.amps.dotc(&(&obs.mat * &psi.amps)).re)
}

/// `|⟨ψ|φ⟩|²`.
pub fn fidelity_pure(psi: &StateVector, phi: &StateVector) -> Result<f64> {
    if psi.dim() != phi.dim() {
        return Err(QnodeError::DimensionMismatch {
            expected: psi.dim(),
            found: phi.dim(),
        });
    }
    Ok(psi.amps.dotc(&phi.amps).norm_sqr().min(1.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pauli {
    I,
    X,
    Y,
    Z,
}

impl Pauli {
    pub fn matrix(self) -> CMat {
        match self {
            Pauli::I => linalg::identity(2),
            Pauli::X => linalg::pauli_x(),
            Pauli::Y => linalg::pauli_y(),
            Pauli::Z => linalg::pauli_z(),
        }
    }

    /// Eigenvectors for eigenvalues +1 and −1.
    pub fn eigenvectors(self) -> Option<[CVec; 2]> {
        let h = FRAC_1_SQRT_2;
        match self {
            Pauli::I => None,
            Pauli::Z => Some([
                CVec::from_vec(vec![ONE, ZERO]),
                CVec::from_vec(vec![ZERO, ONE]),
            ]),
            Pauli::X => Some([
                CVec::from_vec(vec![c(h, 0.0), c(h, 0.0)]),
                CVec::from_vec(vec![c(h, 0.0), c(-h, 0.0)]),
            ]),
            // (|1⟩ ∓ i|0⟩)/√2
            Pauli::Y => Some([
                CVec::from_vec(vec![c(0.0, -h), c(h, 0.0)]),
                CVec::from_vec(vec![c(0.0, h), c(h, 0.0)]),
            ]),
        }
    }

    fn letter(self) -> char {
        match self {
            Pauli::I => 'I',
            Pauli::X => 'X',
            Pauli::Y => 'Y',
            Pauli::Z => 'Z',
        }
    }
}

/// Real multiple of a tensor product of single-qubit Paulis.
#[derive(Clone, Debug, PartialEq)]
pub struct PauliString {
    letters: Vec<Pauli>,
    coeff: f64,
}

impl PauliString {
    pub fn new(letters: Vec<Pauli>, coeff: f64) -> Result<Self> {
        if letters.is_empty() {
            return Err(QnodeError::Parse("empty Pauli string".into()));
        }
        Ok(Self { letters, coeff })
    }

    /// Single non-identity letter at `site` of an `n`-qubit register.
    pub fn single(n: usize, site: usize, p: Pauli) -> Result<Self> {
        if site >= n {
            return Err(QnodeError::IndexOutOfRange { index: site, len: n });
        }
        let mut letters = vec![Pauli::I; n];
        letters[site] = p;
        Self::new(letters, 1.0)
    }

    pub fn letters(&self) -> &[Pauli] {
        &self.letters
    }

    pub fn coeff(&self) -> f64 {
        self.coeff
    }

    pub fn with_coeff(mut self, coeff: f64) -> Self {
        self.coeff = coeff;
        self
    }

    pub fn n_qubits(&self) -> usize {
        self.letters.len()
    }

    pub fn weight(&self) -> usize {
        self.letters.iter().filter(|&&p| p != Pauli::I).count()
    }

    pub fn matrix(&self) -> CMat {
        let mut m = CMat::from_element(1, 1, c(self.coeff, 0.0));
        for p in &self.letters {
            m = kron(&m, &p.matrix());
        }
        m
    }

    pub fn observable(&self) -> HermitianObservable {
        HermitianObservable::from_raw(self.matrix(), vec![2; self.letters.len()])
    }
}

impl FromStr for PauliString {
    type Err = QnodeError;

    /// Accepts `XZ` or a weighted form such as `-0.5*XZ`.
    fn from_str(s: &str) -> Result<Self> {
        let (coeff, body) = match s.split_once('*') {
            Some((c, body)) => (
                c.trim()
                    .parse::<f64>()
                    .map_err(|_| QnodeError::Parse(format!("bad Pauli coefficient in {s:?}")))?,
                body,
            ),
            None => (1.0, s),
        };
        let letters = body
            .trim()
            .chars()
            .map(|ch| match ch.to_ascii_uppercase() {
                'I' => Ok(Pauli::I),
                'X' => Ok(Pauli::X),
                'Y' => Ok(Pauli::Y),
                'Z' => Ok(Pauli::Z),
                other => Err(QnodeError::Parse(format!("unknown Pauli letter {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(letters, coeff)
    }
}

impl fmt::Display for PauliString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self.letters.iter().map(|p| p.letter()).collect();
        if self.coeff == 1.0 {
            write!(f, "{s}")
        } else {
            write!(f, "{}*{s}", self.coeff)
        }
    }
}

/// Signed decomposition of a Pauli string into density matrices.
///
/// Each non-identity letter contributes its ±1 eigenprojectors; identity
/// letters become `1/2` factors whose dimension is folded into the
/// coefficient, so `p = Σ c_j ρ_j` with `2^w` terms.
pub fn pauli_decompose_to_pure(p: &PauliString) -> Result<Vec<(f64, DensityMatrix)>> {
    let w = p.weight();
    if w == 0 {
        return Err(QnodeError::IdentityPauli);
    }
    let n = p.n_qubits();
    let identity_count = n - w;
    let scale = p.coeff * (1u64 << identity_count) as f64;
    let half_identity = linalg::identity(2) * c(0.5, 0.0);

    let mut out = Vec::with_capacity(1 << w);
    for choice in 0..(1usize << w) {
        let mut mat = CMat::from_element(1, 1, ONE);
        let mut sign = 1.0;
        let mut bit = w;
        for letter in &p.letters {
            let factor = match letter.eigenvectors() {
                None => half_identity.clone(),
                Some(vecs) => {
                    bit -= 1;
                    let pick = (choice >> bit) & 1;
                    if pick == 1 {
                        sign = -sign;
                    }
                    linalg::outer(&vecs[pick], &vecs[pick])
                }
            };
            mat = kron(&mat, &factor);
        }
        out.push((scale * sign, DensityMatrix::from_raw(mat, vec![2; n])));
    }
    Ok(out)
}

/// `|0⟩⟨0| ⊗ 1 ⊗ 1 + |1⟩⟨1| ⊗ S` on `C² ⊗ C^d ⊗ C^d`.
pub fn controlled_swap(d: usize) -> CMat {
    let dd = d * d;
    let mut m = CMat::zeros(2 * dd, 2 * dd);
    for i in 0..dd {
        m[(i, i)] = ONE;
    }
    for a in 0..d {
        for b in 0..d {
            m[(dd + b * d + a, dd + a * d + b)] = ONE;
        }
    }
    m
}

fn rx(angle: f64) -> CMat {
    let (s, co) = (angle / 2.0).sin_cos();
    CMat::from_row_slice(2, 2, &[c(co, 0.0), c(0.0, -s), c(0.0, -s), c(co, 0.0)])
}

fn ry(angle: f64) -> CMat {
    let (s, co) = (angle / 2.0).sin_cos();
    CMat::from_row_slice(2, 2, &[c(co, 0.0), c(-s, 0.0), c(s, 0.0), c(co, 0.0)])
}

fn rz(angle: f64) -> CMat {
    CMat::from_row_slice(
        2,
        2,
        &[
            Complex64::from_polar(1.0, -angle / 2.0),
            ZERO,
            ZERO,
            Complex64::from_polar(1.0, angle / 2.0),
        ],
    )
}

/// `⊗_q RZ(α_q) RY(β_q) RX(γ_q) |+⟩` for per-qubit angles `[α, β, γ]`.
pub fn rotated_plus_state(angles: &[[f64; 3]]) -> Result<StateVector> {
    if angles.is_empty() {
        return Err(QnodeError::InvalidState("need at least one qubit".into()));
    }
    let plus = CVec::from_vec(vec![c(FRAC_1_SQRT_2, 0.0), c(FRAC_1_SQRT_2, 0.0)]);
    let mut amps = CVec::from_element(1, ONE);
    for &[alpha, beta, gamma] in angles {
        let q = rz(alpha) * ry(beta) * rx(gamma) * &plus;
        amps = linalg::kron_vec(&amps, &q);
    }
    Ok(StateVector::from_raw(amps, vec![2; angles.len()]))
}

/// Random product input state with each angle drawn from Uniform(0, 4π);
/// draws are taken qubit by qubit in the order α, β, γ.
pub fn random_input_state<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<StateVector> {
    let angles: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.random_range(0.0..4.0 * PI),
                rng.random_range(0.0..4.0 * PI),
                rng.random_range(0.0..4.0 * PI),
            ]
        })
        .collect();
    rotated_plus_state(&angles)
}
