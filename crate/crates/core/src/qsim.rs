//! Dense state-vector simulation of subspace money states.
//!
//! Projections return the branch probability together with the renormalized
//! conditional state. Sampling an outcome is a separate step
//! ([`measure_projector`], [`sample_verify`]) so that analytic probabilities
//! can be asserted exactly.

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::gf2::{Gf2Error, Subspace, MAX_DIM};

/// Branch probabilities below this are treated as impossible.
pub const ZERO_PROBABILITY: f64 = 1e-12;

/// Default comparison tolerance for amplitudes and probabilities.
pub const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QsimError {
    #[error("dimension mismatch: expected {expected} qubits, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{0} qubits exceeds the simulator capacity of {MAX_DIM}")]
    Capacity(usize),
    #[error("expected 2^{n} amplitudes, got {got}")]
    Length { n: usize, got: usize },
    #[error("state is not normalized (norm² = {0})")]
    NotNormalized(f64),
    #[error("verifier needs a subspace of dimension n/2, got {dim} in F2^{n}")]
    NotHalfDimensional { dim: usize, n: usize },
    #[error(transparent)]
    Gf2(#[from] Gf2Error),
}

/// A pure state of `n` qubits.
///
/// The all-zero vector is a valid value: it is the sentinel returned for a
/// postselected branch that cannot occur.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantumState {
    n: usize,
    amps: Vec<Complex64>,
}

impl QuantumState {
    fn check_n(n: usize) -> Result<(), QsimError> {
        if n > MAX_DIM {
            return Err(QsimError::Capacity(n));
        }
        Ok(())
    }

    pub fn basis(n: usize, index: u32) -> Result<Self, QsimError> {
        Self::check_n(n)?;
        let mut amps = vec![Complex64::new(0.0, 0.0); 1 << n];
        let slot = amps.get_mut(index as usize).ok_or(QsimError::Length {
            n,
            got: index as usize,
        })?;
        *slot = Complex64::new(1.0, 0.0);
        Ok(Self { n, amps })
    }

    pub fn zero_sentinel(n: usize) -> Result<Self, QsimError> {
        Self::check_n(n)?;
        Ok(Self {
            n,
            amps: vec![Complex64::new(0.0, 0.0); 1 << n],
        })
    }

    /// Wraps amplitudes, which must already be normalized to 1e-9.
    pub fn from_amplitudes(n: usize, amps: Vec<Complex64>) -> Result<Self, QsimError> {
        Self::check_n(n)?;
        if amps.len() != 1 << n {
            return Err(QsimError::Length { n, got: amps.len() });
        }
        let state = Self { n, amps };
        let norm = state.norm_sqr();
        if (norm - 1.0).abs() > TOLERANCE {
            return Err(QsimError::NotNormalized(norm));
        }
        Ok(state)
    }

    /// A random state with i.i.d. complex Gaussian amplitudes, normalized.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Self, QsimError> {
        Self::check_n(n)?;
        let amps: Vec<Complex64> = (0..1usize << n)
            .map(|_| {
                Complex64::new(
                    StandardNormal.sample(&mut *rng),
                    StandardNormal.sample(&mut *rng),
                )
            })
            .collect();
        Ok(Self::unnormalized(n, amps).normalized())
    }

    fn unnormalized(n: usize, amps: Vec<Complex64>) -> Self {
        Self { n, amps }
    }

    /// Rescales to unit norm; a (near-)zero vector becomes the sentinel.
    fn normalized(mut self) -> Self {
        let norm = self.norm_sqr();
        if norm < ZERO_PROBABILITY {
            self.amps
                .iter_mut()
                .for_each(|a| *a = Complex64::new(0.0, 0.0));
            return self;
        }
        // rescaling an already-unit vector would only add rounding
        if (norm - 1.0).abs() <= 8.0 * f64::EPSILON {
            return self;
        }
        let scale = 1.0 / norm.sqrt();
        self.amps.iter_mut().for_each(|a| *a *= scale);
        self
    }

    pub fn num_qubits(&self) -> usize {
        self.n
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amps
    }

    pub fn norm_sqr(&self) -> f64 {
        self.amps.iter().map(Complex64::norm_sqr).sum()
    }

    pub fn is_zero_sentinel(&self) -> bool {
        self.amps.iter().all(|a| a.re == 0.0 && a.im == 0.0)
    }

    /// ⟨self|other⟩.
    pub fn inner(&self, other: &QuantumState) -> Result<Complex64, QsimError> {
        self.same_n(other.n)?;
        Ok(self
            .amps
            .iter()
            .zip(&other.amps)
            .map(|(a, b)| a.conj() * b)
            .sum())
    }

    /// Largest absolute amplitude difference.
    pub fn max_diff(&self, other: &QuantumState) -> Result<f64, QsimError> {
        self.same_n(other.n)?;
        Ok(self
            .amps
            .iter()
            .zip(&other.amps)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max))
    }

    fn same_n(&self, n: usize) -> Result<(), QsimError> {
        if self.n != n {
            return Err(QsimError::DimensionMismatch {
                expected: self.n,
                got: n,
            });
        }
        Ok(())
    }

    /// JSON-lines `{"index","re","im"}` for amplitudes above 1e-12.
    pub fn dump_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Line {
            index: usize,
            re: f64,
            im: f64,
        }
        let mut out = String::new();
        for (index, a) in self.amps.iter().enumerate() {
            if a.norm() > ZERO_PROBABILITY {
                let line = Line {
                    index,
                    re: a.re,
                    im: a.im,
                };
                out.push_str(&serde_json::to_string(&line).expect("plain struct"));
                out.push('\n');
            }
        }
        out
    }
}

fn check_pair(a: &Subspace, psi: &QuantumState) -> Result<(), QsimError> {
    if a.ambient_dim() != psi.n {
        return Err(QsimError::DimensionMismatch {
            expected: a.ambient_dim(),
            got: psi.n,
        });
    }
    Ok(())
}

/// Result of a postselected projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementOutcome {
    pub accepted: bool,
    /// Squared norm of the accepted branch before renormalization.
    pub probability: f64,
    /// Renormalized accepted branch, or the zero sentinel.
    pub post_state: QuantumState,
}

/// |A⟩ = |A|^(-1/2) Σ_{x∈A} |x⟩.
pub fn build_subspace_state(a: &Subspace) -> Result<QuantumState, QsimError> {
    let n = a.ambient_dim();
    QuantumState::check_n(n)?;
    let members = a.member_indices()?;
    let amp = Complex64::new(1.0 / (members.len() as f64).sqrt(), 0.0);
    let mut amps = vec![Complex64::new(0.0, 0.0); 1 << n];
    for x in members {
        amps[x as usize] = amp;
    }
    Ok(QuantumState::unnormalized(n, amps))
}

/// U_A: phase flip on basis states inside `a`.
pub fn apply_membership_oracle(
    a: &Subspace,
    psi: &QuantumState,
) -> Result<QuantumState, QsimError> {
    check_pair(a, psi)?;
    let amps = psi
        .amps
        .iter()
        .enumerate()
        .map(|(x, &amp)| {
            if a.contains_index(x as u32) {
                -amp
            } else {
                amp
            }
        })
        .collect();
    Ok(QuantumState::unnormalized(psi.n, amps))
}

fn split_on_subspace(a: &Subspace, psi: &QuantumState) -> (QuantumState, QuantumState) {
    let zero = Complex64::new(0.0, 0.0);
    let mut inside = psi.amps.clone();
    let mut outside = psi.amps.clone();
    for x in 0..psi.amps.len() {
        if a.contains_index(x as u32) {
            outside[x] = zero;
        } else {
            inside[x] = zero;
        }
    }
    (
        QuantumState::unnormalized(psi.n, inside),
        QuantumState::unnormalized(psi.n, outside),
    )
}

/// P_A: keeps the amplitudes inside `a`.
pub fn project_onto_subspace(
    a: &Subspace,
    psi: &QuantumState,
) -> Result<MeasurementOutcome, QsimError> {
    check_pair(a, psi)?;
    let (inside, _) = split_on_subspace(a, psi);
    Ok(outcome_from_branch(inside))
}

fn outcome_from_branch(branch: QuantumState) -> MeasurementOutcome {
    let probability = branch.norm_sqr();
    let accepted = probability >= ZERO_PROBABILITY;
    MeasurementOutcome {
        accepted,
        probability: probability.min(1.0),
        post_state: branch.normalized(),
    }
}

/// H^⊗n via the fast Walsh–Hadamard transform. Butterflies run
/// unscaled and each pair of stages is scaled by an exact 1/2, so states
/// with dyadic structure (like |A⟩) transform without rounding.
pub fn hadamard_all(psi: &QuantumState) -> QuantumState {
    let mut amps = psi.amps.clone();
    let len = amps.len();
    let mut half = 1;
    let mut stage = 0;
    while half < len {
        for block in (0..len).step_by(2 * half) {
            for i in block..block + half {
                let (u, v) = (amps[i], amps[i + half]);
                amps[i] = u + v;
                amps[i + half] = u - v;
            }
        }
        stage += 1;
        if stage % 2 == 0 {
            amps.iter_mut().for_each(|a| *a *= 0.5);
        }
        half *= 2;
    }
    if stage % 2 == 1 {
        amps.iter_mut()
            .for_each(|a| *a *= std::f64::consts::FRAC_1_SQRT_2);
    }
    QuantumState::unnormalized(psi.n, amps)
}

fn check_half(a: &Subspace) -> Result<(), QsimError> {
    let n = a.ambient_dim();
    if 2 * a.dim() != n {
        return Err(QsimError::NotHalfDimensional { dim: a.dim(), n });
    }
    Ok(())
}

/// V_A = H P_{A⊥} H P_A, with the combined postselection probability.
pub fn verify_state(a: &Subspace, psi: &QuantumState) -> Result<MeasurementOutcome, QsimError> {
    check_pair(a, psi)?;
    check_half(a)?;
    let first = project_onto_subspace(a, psi)?;
    if !first.accepted {
        return Ok(first);
    }
    let perp = a.orthogonal_complement();
    let second = project_onto_subspace(&perp, &hadamard_all(&first.post_state))?;
    let probability = first.probability * second.probability;
    let post = hadamard_all(&second.post_state);
    Ok(MeasurementOutcome {
        accepted: second.accepted && probability >= ZERO_PROBABILITY,
        probability,
        post_state: if second.accepted {
            post
        } else {
            second.post_state
        },
    })
}

/// Samples the two-outcome measurement {P_A, 1 − P_A}.
pub fn measure_projector<R: Rng + ?Sized>(
    a: &Subspace,
    psi: &QuantumState,
    rng: &mut R,
) -> Result<(bool, QuantumState), QsimError> {
    check_pair(a, psi)?;
    let (inside, outside) = split_on_subspace(a, psi);
    let p = inside.norm_sqr() / psi.norm_sqr().max(f64::MIN_POSITIVE);
    if rng.random::<f64>() < p {
        Ok((true, inside.normalized()))
    } else {
        Ok((false, outside.normalized()))
    }
}

/// Runs V_A stage by stage with sampled outcomes. On rejection the state
/// is the renormalized branch of the stage that failed.
pub fn sample_verify<R: Rng + ?Sized>(
    a: &Subspace,
    psi: &QuantumState,
    rng: &mut R,
) -> Result<(bool, QuantumState), QsimError> {
    check_pair(a, psi)?;
    check_half(a)?;
    if psi.is_zero_sentinel() {
        return Ok((false, psi.clone()));
    }
    let (ok, state) = measure_projector(a, psi, rng)?;
    if !ok {
        return Ok((false, state));
    }
    let perp = a.orthogonal_complement();
    let (ok, state) = measure_projector(&perp, &hadamard_all(&state), rng)?;
    Ok((ok, hadamard_all(&state)))
}

/// Trace distance between pure states, √(1 − |⟨ψ|φ⟩|²).
///
/// Evaluated as √((1 + c)·‖ψ − e^{iα}φ‖²/2) with c = |⟨ψ|φ⟩| and the
/// phase aligned, which stays accurate when the states nearly coincide.
pub fn trace_distance(psi: &QuantumState, phi: &QuantumState) -> Result<f64, QsimError> {
    let overlap = phi.inner(psi)?;
    let c = overlap.norm();
    if c < ZERO_PROBABILITY {
        return Ok(1.0);
    }
    let phase = overlap / c;
    let gap: f64 = psi
        .amps
        .iter()
        .zip(&phi.amps)
        .map(|(a, b)| (a - phase * b).norm_sqr())
        .sum();
    Ok(((1.0 + c) * gap / 2.0).min(1.0).sqrt())
}

/// Baseline counterfeiting strategies for soundness experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CloneStrategy {
    /// Measure in the computational basis and prepare the outcome twice.
    MeasureComputational,
    /// Measure in the Hadamard basis and prepare the outcome twice.
    MeasureHadamard,
    /// Copy the state verbatim if it is a computational basis state,
    /// otherwise fall back to a computational measurement.
    IdentityCopyOfClassicalOutcome,
}

fn sample_index<R: Rng + ?Sized>(psi: &QuantumState, rng: &mut R) -> u32 {
    let total = psi.norm_sqr();
    let mut target = rng.random::<f64>() * total;
    let mut last_nonzero = 0;
    for (i, a) in psi.amps.iter().enumerate() {
        let p = a.norm_sqr();
        if p > 0.0 {
            last_nonzero = i;
        }
        if target < p {
            return i as u32;
        }
        target -= p;
    }
    last_nonzero as u32
}

/// Produces two alleged copies of `psi`. Lab use only: real holders of a
/// coin never see the amplitudes.
pub fn clone_attempt_lab<R: Rng + ?Sized>(
    psi: &QuantumState,
    strategy: CloneStrategy,
    rng: &mut R,
) -> Result<(QuantumState, QuantumState), QsimError> {
    let n = psi.n;
    match strategy {
        CloneStrategy::MeasureComputational => {
            let x = sample_index(psi, rng);
            Ok((QuantumState::basis(n, x)?, QuantumState::basis(n, x)?))
        }
        CloneStrategy::MeasureHadamard => {
            let y = sample_index(&hadamard_all(psi), rng);
            let copy = hadamard_all(&QuantumState::basis(n, y)?);
            Ok((copy.clone(), copy))
        }
        CloneStrategy::IdentityCopyOfClassicalOutcome => {
            let support = psi
                .amps
                .iter()
                .filter(|a| a.norm_sqr() > ZERO_PROBABILITY)
                .count();
            if support == 1 {
                Ok((psi.clone(), psi.clone()))
            } else {
                clone_attempt_lab(psi, CloneStrategy::MeasureComputational, rng)
            }
        }
    }
}
