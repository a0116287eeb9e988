//! Loss functions of the final state together with the seeds
//! `δL/δρ = Σ_j c_j A_Tj a_Tj` consumed by the gradient engines.

use crate::adjoint::{AdjointSeed, SeedComponent};
use crate::error::{QnodeError, Result};
use crate::linalg::{self, c, CMat};
use crate::quantum::{
    partial_trace_matrix, pauli_decompose_to_pure, DensityMatrix, HermitianObservable, PauliString, QuantumState,
};

/// Fidelity-type overlap `tr(σ ρ)` without forming densities for pure pairs.
pub fn overlap(rho: &QuantumState, sigma: &QuantumState) -> Result<f64> {
    if rho.dim() != sigma.dim() {
        return Err(QnodeError::DimensionMismatch {
            expected: sigma.dim(),
            found: rho.dim(),
        });
    }
    Ok(match (rho, sigma) {
        (QuantumState::Pure(a), QuantumState::Pure(b)) => a.amplitudes().dotc(b.amplitudes()).norm_sqr(),
        (QuantumState::Pure(v), QuantumState::Mixed(m)) | (QuantumState::Mixed(m), QuantumState::Pure(v)) => {
            v.amplitudes().dotc(&(m.matrix() * v.amplitudes())).re
        }
        (QuantumState::Mixed(a), QuantumState::Mixed(b)) => linalg::trace_product(a.matrix(), b.matrix()).re,
    })
}

/// `tr(O ρ)` for a Hermitian matrix `O`.
pub fn expectation_of(obs: &CMat, rho: &QuantumState) -> Result<f64> {
    if obs.nrows() != rho.dim() {
        return Err(QnodeError::DimensionMismatch {
            expected: obs.nrows(),
            found: rho.dim(),
        });
    }
    Ok(match rho {
        QuantumState::Pure(v) => v.amplitudes().dotc(&(obs * v.amplitudes())).re,
        QuantumState::Mixed(m) => linalg::trace_product(obs, m.matrix()).re,
    })
}

/// `1 − tr(σ ρ_T)` with seed `(c = 1, A_T = −1, a_T = σ)`.
pub fn stateprep_loss_and_seed(rho_t: &QuantumState, sigma: &QuantumState) -> Result<(f64, AdjointSeed)> {
    if let QuantumState::Mixed(s) = sigma {
        let tr = s.trace();
        if (tr - 1.0).abs() > 1e-10 {
            return Err(QnodeError::InvalidState(format!("target has trace {tr}")));
        }
    }
    let loss = 1.0 - overlap(rho_t, sigma)?;
    Ok((loss, AdjointSeed::single(1.0, -1.0, sigma.clone())?))
}

/// One Hamiltonian-learning sample: model output and black-box target.
pub struct StatePair<'a> {
    pub model: &'a QuantumState,
    pub target: &'a QuantumState,
}

/// `(1/M_s) Σ_j (1 − tr(σ_j ρ_j))` and one state-preparation seed per sample
/// scaled by `1/M_s`.
pub fn hamlearn_loss_and_seeds(batch: &[StatePair<'_>]) -> Result<(f64, Vec<AdjointSeed>)> {
    if batch.is_empty() {
        return Err(QnodeError::InvalidConfig("empty batch".into()));
    }
    let weight = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut seeds = Vec::with_capacity(batch.len());
    for pair in batch {
        let (l, seed) = stateprep_loss_and_seed(pair.model, pair.target)?;
        loss += weight * l;
        seeds.push(seed.scaled(weight));
    }
    Ok((loss, seeds))
}

#[derive(Clone, Debug)]
pub enum ObservableSpec {
    Pauli(PauliString),
    Hermitian(HermitianObservable),
}

impl ObservableSpec {
    pub fn matrix(&self) -> CMat {
        match self {
            ObservableSpec::Pauli(p) => p.matrix(),
            ObservableSpec::Hermitian(h) => h.matrix().clone(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ObservableSpec::Pauli(p) => 1 << p.n_qubits(),
            ObservableSpec::Hermitian(h) => h.dim(),
        }
    }

    pub fn operator_norm(&self) -> f64 {
        match self {
            ObservableSpec::Pauli(p) => p.coeff().abs(),
            ObservableSpec::Hermitian(h) => h.operator_norm(),
        }
    }

    /// `O = Σ_j s_j ρ_j` with signed weights and density matrices; pure
    /// terms are returned as state vectors.
    pub fn signed_decomposition(&self) -> Result<Vec<(f64, QuantumState)>> {
        match self {
            ObservableSpec::Pauli(p) => Ok(pauli_decompose_to_pure(p)?
                .into_iter()
                .map(|(s, rho)| {
                    let state = if p.weight() == p.n_qubits() {
                        rho.as_pure(1e-10).map(QuantumState::Pure).unwrap_or(QuantumState::Mixed(rho))
                    } else {
                        QuantumState::Mixed(rho)
                    };
                    (s, state)
                })
                .collect()),
            ObservableSpec::Hermitian(h) => {
                let spec = h.spectral();
                let mut out = Vec::with_capacity(2);
                for sign in [1.0, -1.0] {
                    let part = linalg::spectral_map(&spec.values, &spec.vectors, |v| {
                        c((sign * v).max(0.0), 0.0)
                    });
                    let tr = linalg::trace(&part).re;
                    if tr > 1e-14 {
                        let rho = DensityMatrix::from_raw(part * c(1.0 / tr, 0.0), h.dims().to_vec());
                        out.push((sign * tr, QuantumState::Mixed(rho)));
                    }
                }
                if out.is_empty() {
                    return Err(QnodeError::InvalidSeed("observable is zero".into()));
                }
                Ok(out)
            }
        }
    }
}

/// Tomography datum `tr(O σ(T))` for one probe.
#[derive(Clone, Debug)]
pub struct ObservableRecord {
    pub observable: ObservableSpec,
    pub value: f64,
    pub input: usize,
    pub time: f64,
}

impl ObservableRecord {
    pub fn validate(&self) -> Result<()> {
        let bound = self.observable.operator_norm();
        if !(self.value.abs() <= bound * (1.0 + 1e-9) + 1e-12) {
            return Err(QnodeError::InvalidConfig(format!(
                "datum {} exceeds the observable norm {bound}",
                self.value
            )));
        }
        Ok(())
    }
}

/// `(1/N) Σ_r |data_r − tr(O_r ρ_r)|²` with one seed per record, each the
/// signed decomposition of `(2/N)(tr(O_r ρ_r) − data_r) O_r`.
pub fn observable_loss_and_seed(
    records: &[ObservableRecord],
    model_states: &[&QuantumState],
) -> Result<(f64, Vec<AdjointSeed>)> {
    if records.is_empty() || records.len() != model_states.len() {
        return Err(QnodeError::DimensionMismatch {
            expected: records.len(),
            found: model_states.len(),
        });
    }
    let weight = 1.0 / records.len() as f64;
    let mut loss = 0.0;
    let mut seeds = Vec::with_capacity(records.len());
    for (rec, rho) in records.iter().zip(model_states) {
        rec.validate()?;
        let predicted = expectation_of(&rec.observable.matrix(), rho)?;
        let residual = predicted - rec.value;
        loss += weight * residual * residual;
        let prefactor = 2.0 * residual * weight;
        let components = rec
            .observable
            .signed_decomposition()?
            .into_iter()
            .map(|(s, state)| SeedComponent {
                coeff: prefactor * s.signum(),
                scale: s.abs(),
                state,
            })
            .collect();
        seeds.push(AdjointSeed::new(components)?);
    }
    Ok((loss, seeds))
}

/// `1 − tr(ρ_red²)` of the system factor of `R_T` (ancilla last) with the
/// full-space seed `a_T = ρ_red ⊗ 1/d_e`, `A_T = −2 d_e`.
pub fn purity_loss_and_seed(r_t: &DensityMatrix, ancilla_dim: usize) -> Result<(f64, AdjointSeed)> {
    let total = r_t.dim();
    if ancilla_dim == 0 || total % ancilla_dim != 0 {
        return Err(QnodeError::InvalidSubsystems(format!(
            "dimension {total} does not factor with ancilla dimension {ancilla_dim}"
        )));
    }
    let d = total / ancilla_dim;
    let reduced = partial_trace_matrix(r_t.matrix(), &[d, ancilla_dim], &[0])?;
    let loss = 1.0 - linalg::trace_product(&reduced, &reduced).re;
    let adj = linalg::kron(&reduced, &(linalg::identity(ancilla_dim) * c(1.0 / ancilla_dim as f64, 0.0)));
    let seed = AdjointSeed::single(
        1.0,
        -2.0 * ancilla_dim as f64,
        DensityMatrix::from_raw(adj, r_t.dims().to_vec()),
    )?;
    Ok((loss, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjoint::{adjoint_oracle_gradient, circuit_gradient, GradientOptions, ShotBudget, TimeGrid};
    use crate::evolution::{evolve_state, PropagatorConfig};
    use crate::hamiltonian::{single_qubit_ansatz, ParametricHamiltonian, Schedule};
    use crate::quantum::{Pauli, StateVector};
    use crate::sampling;
    use proptest::prelude::{prop_assert, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pauli(s: &str) -> PauliString {
        s.parse().unwrap()
    }

    fn central_difference(f: impl Fn(&[f64]) -> f64, theta: &[f64], h: f64) -> Vec<f64> {
        (0..theta.len())
            .map(|m| {
                let mut up = theta.to_vec();
                let mut down = theta.to_vec();
                up[m] += h;
                down[m] -= h;
                (f(&up) - f(&down)) / (2.0 * h)
            })
            .collect()
    }

    fn evolve(h: &ParametricHamiltonian, theta: &[f64], rho0: &QuantumState, t: f64) -> QuantumState {
        evolve_state(rho0, h, theta, 0.0, t, &PropagatorConfig::exact(t)).unwrap()
    }

    fn gradient_from_seeds(
        h: &ParametricHamiltonian,
        theta: &[f64],
        rho0: &QuantumState,
        seeds: &[AdjointSeed],
        t: f64,
    ) -> Vec<f64> {
        let grid = TimeGrid::trapezoid(t, 1000).unwrap();
        let mut out = vec![0.0; theta.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for seed in seeds {
            let g = circuit_gradient(h, theta, rho0, seed, &grid, ShotBudget::Exact, &mut rng, &GradientOptions::exact(t))
                .unwrap();
            for (o, v) in out.iter_mut().zip(g.values) {
                *o += v;
            }
        }
        out
    }

    #[test]
    fn stateprep_examples() {
        let plus: QuantumState = StateVector::plus(1).into();
        let zero: QuantumState = StateVector::zeros(1).into();
        let (l, _) = stateprep_loss_and_seed(&plus, &plus).unwrap();
        assert!(l.abs() < 1e-15);
        let (l, seed) = stateprep_loss_and_seed(&zero, &plus).unwrap();
        assert!((l - 0.5).abs() < 1e-15);
        let comp = &seed.components()[0];
        assert_eq!((comp.coeff, comp.scale), (1.0, -1.0));
        assert_eq!(comp.state, plus);
    }

    #[test]
    fn single_sample_batch_reduces_to_stateprep() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: QuantumState = sampling::random_pure(&[2, 2], &mut rng).into();
        let b: QuantumState = sampling::random_pure(&[2, 2], &mut rng).into();
        let (l1, s1) = stateprep_loss_and_seed(&a, &b).unwrap();
        let (l2, s2) = hamlearn_loss_and_seeds(&[StatePair { model: &a, target: &b }]).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(vec![s1], s2);
        assert!(hamlearn_loss_and_seeds(&[]).is_err());
    }

    #[test]
    fn hamlearn_loss_matches_direct_propagators() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = crate::hamiltonian::builtin_ising(2, &mut rng).unwrap();
        let theta: Vec<f64> = (0..model.ansatz.n_params()).map(|_| rng.random_range(-0.5..0.5)).collect();
        let inputs: Vec<QuantumState> = (0..3).map(|_| crate::quantum::random_input_state(2, &mut rng).unwrap().into()).collect();
        let times = [1.2, 1.5, 1.9];
        let models: Vec<QuantumState> = inputs.iter().zip(times).map(|(r, t)| evolve(&model.ansatz, &theta, r, t)).collect();
        let targets: Vec<QuantumState> = inputs
            .iter()
            .zip(times)
            .map(|(r, t)| evolve(&model.target, &model.target_theta, r, t))
            .collect();
        let batch: Vec<StatePair> = models.iter().zip(&targets).map(|(m, t)| StatePair { model: m, target: t }).collect();
        let (loss, seeds) = hamlearn_loss_and_seeds(&batch).unwrap();
        let mut direct = 0.0;
        for ((r, t), target) in inputs.iter().zip(times).zip(&targets) {
            let u = linalg::expm_hermitian(&model.ansatz.evaluate(0.0, &theta).unwrap().matrix().clone(), t);
            let QuantumState::Pure(v) = r else { unreachable!() };
            let out = &u * v.amplitudes();
            let QuantumState::Pure(tv) = target else { unreachable!() };
            direct += (1.0 - out.dotc(tv.amplitudes()).norm_sqr()) / 3.0;
        }
        assert!((loss - direct).abs() < 1e-10);
        assert!(seeds.iter().all(|s| s.components()[0].coeff == 1.0 / 3.0));
        let (at_truth, _) = {
            let truth: Vec<QuantumState> = inputs
                .iter()
                .zip(times)
                .map(|(r, t)| evolve(&model.ansatz, &model.target_theta, r, t))
                .collect();
            let batch: Vec<StatePair> = truth.iter().zip(&targets).map(|(m, t)| StatePair { model: m, target: t }).collect();
            hamlearn_loss_and_seeds(&batch).unwrap()
        };
        assert!(at_truth.abs() < 1e-10);
    }

    #[test]
    fn observable_seed_example() {
        // ρ with ⟨Z⟩ = 0.3 and datum 0.1
        let rho = DensityMatrix::new(
            CMat::from_row_slice(2, 2, &[c(0.65, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.35, 0.0)]),
            vec![2],
        )
        .unwrap();
        let state: QuantumState = rho.into();
        let rec = ObservableRecord {
            observable: ObservableSpec::Pauli(pauli("Z")),
            value: 0.1,
            input: 0,
            time: 1.0,
        };
        let (loss, seeds) = observable_loss_and_seed(&[rec.clone()], &[&state]).unwrap();
        assert!((loss - 0.04).abs() < 1e-14);
        let comps = seeds[0].components();
        assert_eq!(comps.len(), 2);
        assert!((comps[0].coeff - 0.4).abs() < 1e-14 && comps[0].scale == 1.0);
        assert!((comps[1].coeff + 0.4).abs() < 1e-14 && comps[1].scale == 1.0);
        assert_eq!(comps[0].state, QuantumState::Pure(StateVector::zeros(1)));
        let one = StateVector::basis(vec![2], 1).unwrap();
        let QuantumState::Pure(v) = &comps[1].state else { panic!() };
        assert!((v.amplitudes().dotc(one.amplitudes()).norm() - 1.0).abs() < 1e-12);

        let consistent = ObservableRecord { value: 0.3, ..rec };
        let (loss, seeds) = observable_loss_and_seed(&[consistent], &[&state]).unwrap();
        assert!(loss.abs() < 1e-20);
        assert!(seeds[0].components().iter().all(|c| c.coeff.abs() < 1e-15));
    }

    #[test]
    fn identity_observable_is_rejected() {
        let state: QuantumState = StateVector::zeros(1).into();
        let rec = ObservableRecord {
            observable: ObservableSpec::Pauli(pauli("I")),
            value: 1.0,
            input: 0,
            time: 1.0,
        };
        assert_eq!(observable_loss_and_seed(&[rec], &[&state]).unwrap_err(), QnodeError::IdentityPauli);
    }

    fn observable_derivative(rec: &ObservableRecord, rho: &QuantumState, weight: f64) -> CMat {
        let o = rec.observable.matrix();
        let pred = expectation_of(&o, rho).unwrap();
        o * c(2.0 * weight * (pred - rec.value), 0.0)
    }

    #[test]
    fn observable_seeds_reconstruct_every_single_qubit_pauli() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in [Pauli::X, Pauli::Y, Pauli::Z] {
            for coeff in [1.0, -0.7] {
                let rho: QuantumState = sampling::random_density(&[2], &mut rng).into();
                let rec = ObservableRecord {
                    observable: ObservableSpec::Pauli(PauliString::new(vec![p], coeff).unwrap()),
                    value: 0.2 * coeff,
                    input: 0,
                    time: 1.0,
                };
                let (_, seeds) = observable_loss_and_seed(&[rec.clone()], &[&rho]).unwrap();
                let expected = observable_derivative(&rec, &rho, 1.0);
                assert!(linalg::max_abs_diff(&seeds[0].operator(), &expected) < 1e-10);
            }
        }
    }

    #[test]
    fn observable_seeds_reconstruct_two_qubit_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let letters = [Pauli::I, Pauli::X, Pauli::Y, Pauli::Z];
        for _ in 0..100 {
            let rho: QuantumState = sampling::random_density(&[2, 2], &mut rng).into();
            let spec = if rng.random_bool(0.5) {
                let mut ls = [Pauli::I, Pauli::I];
                while ls == [Pauli::I, Pauli::I] {
                    ls = [letters[rng.random_range(0..4)], letters[rng.random_range(0..4)]];
                }
                ObservableSpec::Pauli(PauliString::new(ls.to_vec(), rng.random_range(-1.0..1.0)).unwrap())
            } else {
                ObservableSpec::Hermitian(sampling::random_hermitian(&[2, 2], &mut rng))
            };
            let value = rng.random_range(-1.0..1.0) * spec.operator_norm();
            let rec = ObservableRecord {
                observable: spec,
                value,
                input: 0,
                time: 1.0,
            };
            let (_, seeds) = observable_loss_and_seed(&[rec.clone(), rec.clone()], &[&rho, &rho]).unwrap();
            let expected = observable_derivative(&rec, &rho, 0.5);
            for seed in &seeds {
                assert!(linalg::max_abs_diff(&seed.operator(), &expected) < 1e-10);
            }
        }
    }

    #[test]
    fn recombined_observable_seed_matches_raw_operator_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = crate::hamiltonian::builtin_hydrogen().ansatz;
        let theta = [0.3, -0.4, 0.2, 0.5];
        let rho0: QuantumState = sampling::random_pure(&[2, 2], &mut rng).into();
        let rho_t = evolve(&h, &theta, &rho0, 1.0);
        let rec = ObservableRecord {
            observable: ObservableSpec::Pauli(pauli("XY")),
            value: 0.25,
            input: 0,
            time: 1.0,
        };
        let (_, seeds) = observable_loss_and_seed(&[rec.clone()], &[&rho_t]).unwrap();
        let grid = TimeGrid::trapezoid(1.0, 200).unwrap();
        let opts = GradientOptions::exact(1.0);
        let via_seed = adjoint_oracle_gradient(&h, &theta, &rho0, &seeds[0], &grid, &opts).unwrap();
        let raw = crate::adjoint::adjoint_oracle_gradient_operator(&h, &theta, &rho0, &observable_derivative(&rec, &rho_t, 1.0), &grid, &opts)
            .unwrap();
        for (a, b) in via_seed.values.iter().zip(&raw.values) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn observable_gradient_matches_finite_differences() {
        let h = single_qubit_ansatz();
        let theta = [0.3, -0.2, 0.5];
        let rho0: QuantumState = StateVector::zeros(1).into();
        let rec = ObservableRecord {
            observable: ObservableSpec::Pauli(pauli("X")),
            value: -0.4,
            input: 0,
            time: 1.0,
        };
        let loss = |th: &[f64]| {
            let rho_t = evolve(&h, th, &rho0, 1.0);
            observable_loss_and_seed(&[rec.clone()], &[&rho_t]).unwrap().0
        };
        let rho_t = evolve(&h, &theta, &rho0, 1.0);
        let (_, seeds) = observable_loss_and_seed(&[rec.clone()], &[&rho_t]).unwrap();
        let g = gradient_from_seeds(&h, &theta, &rho0, &seeds, 1.0);
        let fd = central_difference(loss, &theta, 1e-5);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-5, "{g:?} {fd:?}");
        }
    }

    #[test]
    fn purity_examples() {
        let product = StateVector::zeros(1).tensor(&StateVector::plus(1)).to_density();
        let (loss, _) = purity_loss_and_seed(&product, 2).unwrap();
        assert!(loss.abs() < 1e-14);
        let bell = StateVector::normalized(
            crate::linalg::CVec::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(1.0, 0.0)]),
            vec![2, 2],
        )
        .unwrap()
        .to_density();
        let (loss, seed) = purity_loss_and_seed(&bell, 2).unwrap();
        assert!((loss - 0.5).abs() < 1e-14);
        let comp = &seed.components()[0];
        assert_eq!(comp.scale, -4.0);
        let quarter = linalg::identity(4) * c(0.25, 0.0);
        assert!(linalg::max_abs_diff(comp.state.to_density().matrix(), &quarter) < 1e-14);
        assert!(purity_loss_and_seed(&bell, 3).is_err());
    }

    #[test]
    fn purity_seed_reconstructs_the_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let r = sampling::random_density(&[2, 2], &mut rng);
            let (_, seed) = purity_loss_and_seed(&r, 2).unwrap();
            let reduced = partial_trace_matrix(r.matrix(), &[2, 2], &[0]).unwrap();
            let expected = linalg::kron(&reduced, &linalg::identity(2)) * c(-2.0, 0.0);
            assert!(linalg::max_abs_diff(&seed.operator(), &expected) < 1e-10);
        }
    }

    #[test]
    fn purity_gradient_matches_finite_differences() {
        // system qubit entangled with an ancilla through an XX coupling
        let h = ParametricHamiltonian::from_paulis(
            vec![
                (pauli("XX"), Schedule::Constant { index: 0 }),
                (pauli("ZI"), Schedule::Constant { index: 1 }),
                (pauli("YZ"), Schedule::Constant { index: 2 }),
            ],
            3,
        )
        .unwrap();
        let theta = [0.4, 0.3, -0.6];
        let rho0: QuantumState = StateVector::zeros(2).into();
        let loss = |th: &[f64]| {
            let r = evolve(&h, th, &rho0, 1.0).to_density();
            purity_loss_and_seed(&r, 2).unwrap().0
        };
        let r = evolve(&h, &theta, &rho0, 1.0).to_density();
        let (_, seed) = purity_loss_and_seed(&r, 2).unwrap();
        let g = gradient_from_seeds(&h, &theta, &rho0, &[seed], 1.0);
        let fd = central_difference(loss, &theta, 1e-5);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() < 1e-5, "{g:?} {fd:?}");
        }
    }

    #[test]
    fn stateprep_gradient_matches_finite_differences() {
        let h = single_qubit_ansatz();
        let sigma: QuantumState = StateVector::plus(1).into();
        let rho0: QuantumState = StateVector::zeros(1).into();
        let loss = |th: &[f64]| stateprep_loss_and_seed(&evolve(&h, th, &rho0, 1.0), &sigma).unwrap().0;
        let fd = central_difference(loss, &[0.0; 3], 1e-5);
        for (a, b) in fd.iter().zip([0.0, -1.0, 0.0]) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

        #[test]
        fn seed_rescaling_leaves_the_gradient_unchanged(lambda in 0.05f64..20.0, seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let h = single_qubit_ansatz();
            let theta: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let rho0: QuantumState = sampling::random_pure(&[2], &mut rng).into();
            let a = sampling::random_density(&[2], &mut rng);
            let seed = AdjointSeed::single(0.7, -1.3, a.clone()).unwrap();
            let rescaled = AdjointSeed::single(0.7 / lambda, -1.3 * lambda, a).unwrap();
            let grid = TimeGrid::trapezoid(1.0, 10).unwrap();
            let opts = GradientOptions::exact(1.0);
            let g1 = circuit_gradient(&h, &theta, &rho0, &seed, &grid, ShotBudget::Exact, &mut rng, &opts).unwrap();
            let g2 = circuit_gradient(&h, &theta, &rho0, &rescaled, &grid, ShotBudget::Exact, &mut rng, &opts).unwrap();
            for (x, y) in g1.values.iter().zip(&g2.values) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn losses_are_nonnegative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: QuantumState = sampling::random_density(&[2, 2], &mut rng).into();
            let b: QuantumState = sampling::random_pure(&[2, 2], &mut rng).into();
            prop_assert!(stateprep_loss_and_seed(&a, &b).unwrap().0 >= -1e-15);
            let r = sampling::random_density(&[2, 2], &mut rng);
            prop_assert!(purity_loss_and_seed(&r, 2).unwrap().0 >= -1e-15);
            let rec = ObservableRecord {
                observable: ObservableSpec::Pauli(pauli("ZX")),
                value: rng.random_range(-1.0..1.0),
                input: 0,
                time: 1.0,
            };
            prop_assert!(observable_loss_and_seed(&[rec], &[&a]).unwrap().0 >= 0.0);
        }
    }
}
