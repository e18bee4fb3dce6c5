//! Closed forms for the reuse attack and the coin longevity experiment.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::One;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::factorial::ln_binomial;
use thiserror::Error;

use crate::gf2::Subspace;
use crate::qsim::{self, QsimError, QuantumState};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("outside the model's domain: {0}")]
    Domain(String),
    #[error(transparent)]
    Qsim(#[from] QsimError),
}

/// Parameters of the two-window reuse attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReuseBoundInput {
    /// Blocks per window.
    pub k: u64,
    /// Shards per coin.
    pub m: u64,
    /// Attacker share of the hash power.
    pub p: f64,
    pub epsilon: f64,
}

impl ReuseBoundInput {
    pub fn new(k: u64, m: u64, p: f64) -> Self {
        Self {
            k,
            m,
            p,
            epsilon: 0.0,
        }
    }

    /// γ = (m − 2) / k.
    pub fn gamma(&self) -> f64 {
        (self.m as f64 - 2.0) / self.k as f64
    }

    fn check(&self) -> Result<(), AnalyticsError> {
        if self.m < 2 || self.m - 2 > self.k {
            return Err(AnalyticsError::Domain(format!(
                "need 2 <= m <= k + 2, got k = {}, m = {}",
                self.k, self.m
            )));
        }
        if !(0.0..1.0).contains(&self.p) {
            return Err(AnalyticsError::Domain(format!(
                "p must lie in [0, 1), got {}",
                self.p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EtaExact {
    pub eta1: f64,
    pub eta2: f64,
    pub eta: f64,
    pub log2_eta1: f64,
    pub log2_eta2: f64,
    pub log2_eta: f64,
}

/// x·ln y with the convention 0·ln 0 = 0.
fn xlny(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

/// ln P(exactly `wins` of `slots` Bernoulli(p) trials).
fn ln_binomial_pmf(slots: u64, wins: u64, p: f64) -> f64 {
    ln_binomial(slots, wins) + xlny(wins as f64, p) + xlny((slots - wins) as f64, 1.0 - p)
}

/// η₁ = C(k, m−2) p^{m−2} (1−p)^{k−m+2}, η₂ = k p (1−p)^{k−1}, η = η₁η₂,
/// evaluated in the log domain.
pub fn eta_exact(input: &ReuseBoundInput) -> Result<EtaExact, AnalyticsError> {
    input.check()?;
    let ln1 = ln_binomial_pmf(input.k, input.m - 2, input.p);
    let ln2 = ln_binomial_pmf(input.k, 1, input.p);
    let l2 = std::f64::consts::LN_2;
    Ok(EtaExact {
        eta1: ln1.exp(),
        eta2: ln2.exp(),
        eta: (ln1 + ln2).exp(),
        log2_eta1: ln1 / l2,
        log2_eta2: ln2 / l2,
        log2_eta: (ln1 + ln2) / l2,
    })
}

fn binomial(n: u64, k: u64) -> BigInt {
    let mut acc = BigInt::one();
    for i in 0..k {
        acc = acc * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    acc
}

fn pow(x: &BigRational, e: u64) -> BigRational {
    (0..e).fold(BigRational::one(), |acc, _| acc * x)
}

/// Exact (η₁, η₂, η) for a rational `p`.
pub fn eta_exact_rational(
    k: u64,
    m: u64,
    p: &BigRational,
) -> Result<(BigRational, BigRational, BigRational), AnalyticsError> {
    if m < 2 || m - 2 > k || k == 0 {
        return Err(AnalyticsError::Domain(format!(
            "need 2 <= m <= k + 2, got k = {k}, m = {m}"
        )));
    }
    let q = BigRational::one() - p;
    let e = m - 2;
    let eta1 = BigRational::from_integer(binomial(k, e)) * pow(p, e) * pow(&q, k - e);
    let eta2 = BigRational::from_integer(BigInt::from(k)) * p * pow(&q, k - 1);
    let eta = &eta1 * &eta2;
    Ok((eta1, eta2, eta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EtaBound {
    /// (k / 2e) · 2^{−γk}.
    pub bound: f64,
    pub log2_bound: f64,
    /// γ / (2e + γ); the bound only applies below it.
    pub p_limit: f64,
    pub admissible: bool,
}

/// Upper bound on the reuse-attack probability. The value is always
/// returned; `admissible` says whether `p` is in the range where it holds.
pub fn eta_bound(input: &ReuseBoundInput) -> Result<EtaBound, AnalyticsError> {
    input.check()?;
    let k = input.k as f64;
    let gamma = input.gamma();
    if !(gamma > 1.0 / k && gamma <= 1.0) {
        return Err(AnalyticsError::Domain(format!(
            "gamma must lie in (1/k, 1], got {gamma}"
        )));
    }
    if input.epsilon > 0.0 && gamma >= 1.0 / (k * input.epsilon) - 1.0 / k {
        return Err(AnalyticsError::Domain(format!(
            "gamma must stay below 1/(k*epsilon) - 1/k for epsilon = {}",
            input.epsilon
        )));
    }
    let e = std::f64::consts::E;
    let log2_bound = (k / (2.0 * e)).log2() - gamma * k;
    let p_limit = gamma / (2.0 * e + gamma);
    Ok(EtaBound {
        bound: log2_bound.exp2(),
        log2_bound,
        p_limit,
        admissible: input.p < p_limit,
    })
}

/// C(n, k) < (n e / k)^k.
pub fn binomial_bound_holds(n: u64, k: u64) -> bool {
    let exact: f64 = binomial(n, k).to_string().parse().expect("decimal integer");
    let bound = (n as f64 * std::f64::consts::E / k as f64).powi(k as i32);
    exact < bound
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub k: u64,
    pub m: u64,
    pub gamma: f64,
    pub p: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub eta: f64,
    pub bound: f64,
    pub p_limit: f64,
    pub admissible: bool,
}

pub const SWEEP_CSV_HEADER: &str = "k,m,gamma,p,eta1,eta2,eta,bound,p_limit,admissible";

impl SweepRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:e},{:e},{:e},{:e},{:.6},{}",
            self.k,
            self.m,
            self.gamma,
            self.p,
            self.eta1,
            self.eta2,
            self.eta,
            self.bound,
            self.p_limit,
            self.admissible
        )
    }
}

/// m = γk + 2, rounded to the nearest integer.
pub fn m_for(gamma: f64, k: u64) -> u64 {
    (gamma * k as f64).round() as u64 + 2
}

/// Evaluates every (k, γ, p) combination; rows come out in grid order.
pub fn sweep(
    ks: &[u64],
    gammas: &[f64],
    ps: &[f64],
    epsilon: f64,
) -> Result<Vec<SweepRow>, AnalyticsError> {
    let points: Vec<(u64, f64, f64)> = gammas
        .iter()
        .flat_map(|&g| {
            ks.iter()
                .flat_map(move |&k| ps.iter().map(move |&p| (k, g, p)))
        })
        .collect();
    points
        .into_par_iter()
        .map(|(k, gamma, p)| {
            let input = ReuseBoundInput {
                k,
                m: m_for(gamma, k),
                p,
                epsilon,
            };
            let exact = eta_exact(&input)?;
            let bound = eta_bound(&input)?;
            Ok(SweepRow {
                k,
                m: input.m,
                gamma: input.gamma(),
                p,
                eta1: exact.eta1,
                eta2: exact.eta2,
                eta: exact.eta,
                bound: bound.bound,
                p_limit: bound.p_limit,
                admissible: bound.admissible,
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LongevityMode {
    /// Condition every round on acceptance and record its probability.
    Postselect,
    /// Sample the verifier; a rejection ends the experiment.
    Sample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LongevityConfig {
    pub rounds: u64,
    /// Per-round rejection probability of the whole coin; 0 for ideal states.
    pub epsilon: f64,
    pub mode: LongevityMode,
    pub wear_out_threshold: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LongevityReport {
    pub verifications: u64,
    pub epsilon: f64,
    /// √ε, the per-round recovery bound.
    pub bound: f64,
    pub trace_distances: Vec<f64>,
    /// Sum of per-round distances, which bounds the drift from the start.
    pub cumulative_distance: f64,
    pub max_distance: f64,
    pub threshold: f64,
    /// Rounds completed before the cumulative distance passed the threshold.
    pub survived_rounds: u64,
    pub worn_out_at: Option<u64>,
    pub rejected_at: Option<u64>,
    /// Product of per-round acceptance probabilities.
    pub acceptance_probability: f64,
}

impl LongevityReport {
    pub fn within_bound(&self) -> bool {
        self.trace_distances
            .iter()
            .all(|&d| d <= self.bound + qsim::TOLERANCE)
    }
}

/// Rotates `psi` toward the basis state `y` (orthogonal to it) by θ.
fn rotate_toward(psi: &QuantumState, y: u32, cos: f64) -> Result<QuantumState, QsimError> {
    let sin = (1.0 - cos * cos).max(0.0).sqrt();
    let mut amps: Vec<_> = psi.amplitudes().iter().map(|a| a * cos).collect();
    amps[y as usize] += sin;
    QuantumState::from_amplitudes(psi.num_qubits(), amps)
}

/// Repeatedly perturbs, verifies and recovers a coin given as
/// (subspace, state) pairs, tracking the trace distance between each
/// round's input and recovered product state.
///
/// The perturbation rotates every shard toward a fixed basis state outside
/// its subspace, with per-shard overlap (1 − ε)^{1/m} so that the coin as
/// a whole passes with probability exactly 1 − ε.
pub fn run_longevity(
    coin: Vec<(Subspace, QuantumState)>,
    config: &LongevityConfig,
) -> Result<LongevityReport, AnalyticsError> {
    if config.rounds == 0 || coin.is_empty() {
        return Err(AnalyticsError::Domain(
            "need at least one round and one shard".into(),
        ));
    }
    if !(0.0..1.0).contains(&config.epsilon) {
        return Err(AnalyticsError::Domain(format!(
            "epsilon must lie in [0, 1), got {}",
            config.epsilon
        )));
    }
    let m = coin.len() as f64;
    let cos = (1.0 - config.epsilon).powf(0.5 / m);
    let mut outside = Vec::with_capacity(coin.len());
    for (a, _) in &coin {
        let size = 1u32 << a.ambient_dim();
        outside.push(
            (0..size)
                .find(|&y| !a.contains_index(y))
                .expect("proper subspace"),
        );
    }
    let (subspaces, mut states): (Vec<_>, Vec<_>) = coin.into_iter().unzip();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = LongevityReport {
        verifications: 0,
        epsilon: config.epsilon,
        bound: config.epsilon.sqrt(),
        trace_distances: Vec::new(),
        cumulative_distance: 0.0,
        max_distance: 0.0,
        threshold: config.wear_out_threshold,
        survived_rounds: 0,
        worn_out_at: None,
        rejected_at: None,
        acceptance_probability: 1.0,
    };
    for round in 1..=config.rounds {
        // ln of Π |⟨before|after⟩|² accumulated as ln(1 − dᵢ²)
        let mut ln_overlap = 0.0;
        let mut ln_accept = 0.0;
        let mut rejected = false;
        for i in 0..states.len() {
            let before = if config.epsilon > 0.0 {
                rotate_toward(&states[i], outside[i], cos)?
            } else {
                states[i].clone()
            };
            let after = match config.mode {
                LongevityMode::Postselect => {
                    let out = qsim::verify_state(&subspaces[i], &before)?;
                    ln_accept += out.probability.ln();
                    out.post_state
                }
                LongevityMode::Sample => {
                    let (ok, post) = qsim::sample_verify(&subspaces[i], &before, &mut rng)?;
                    rejected |= !ok;
                    post
                }
            };
            let d = qsim::trace_distance(&before, &after)?;
            ln_overlap += (-d * d).ln_1p();
            states[i] = after;
        }
        report.verifications += 1;
        if rejected {
            report.rejected_at = Some(round);
            report.acceptance_probability = 0.0;
            break;
        }
        report.acceptance_probability *= ln_accept.exp();
        let distance = (-ln_overlap.exp_m1()).max(0.0).sqrt();
        report.trace_distances.push(distance);
        report.max_distance = report.max_distance.max(distance);
        report.cumulative_distance += distance;
        if report.cumulative_distance > config.wear_out_threshold + qsim::TOLERANCE {
            report.worn_out_at = Some(round);
            break;
        }
        report.survived_rounds = round;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gf2::sample_subspace;
    use num_traits::Zero;

    fn rational(num: i64, den: i64) -> BigRational {
        BigRational::new(BigInt::from(num), BigInt::from(den))
    }

    /// Sums the probability of every win/loss sequence of one window with
    /// exactly `wins` attacker wins.
    fn enumerate_window(k: u64, wins: u32, p: &BigRational) -> BigRational {
        let q = BigRational::one() - p;
        let mut total = BigRational::zero();
        for pattern in 0u32..1 << k {
            if pattern.count_ones() != wins {
                continue;
            }
            let mut prob = BigRational::one();
            for slot in 0..k {
                prob *= if pattern >> slot & 1 == 1 {
                    p.clone()
                } else {
                    q.clone()
                };
            }
            total += prob;
        }
        total
    }

    #[test]
    fn small_example_by_hand() {
        let e = eta_exact(&ReuseBoundInput::new(3, 3, 0.5)).unwrap();
        assert!((e.eta1 - 0.375).abs() < 1e-12);
        assert!((e.eta2 - 0.375).abs() < 1e-12);
        assert!((e.eta - 0.140625).abs() < 1e-12);
        let half = rational(1, 2);
        let (e1, e2, eta) = eta_exact_rational(3, 3, &half).unwrap();
        assert_eq!(e1, rational(3, 8));
        assert_eq!(e2, rational(3, 8));
        assert_eq!(eta, rational(9, 64));
        assert_eq!(
            enumerate_window(3, 1, &half) * enumerate_window(3, 1, &half),
            rational(9, 64)
        );
    }

    #[test]
    fn zero_power_means_zero_probability() {
        for m in 3..8 {
            let e = eta_exact(&ReuseBoundInput::new(10, m, 0.0)).unwrap();
            assert_eq!((e.eta1, e.eta2, e.eta), (0.0, 0.0, 0.0));
        }
        // with m = 2 the first window needs no wins at all
        assert_eq!(
            eta_exact(&ReuseBoundInput::new(10, 2, 0.0)).unwrap().eta1,
            1.0
        );
    }

    #[test]
    fn domain_errors() {
        assert!(eta_exact(&ReuseBoundInput::new(5, 8, 0.1)).is_err());
        assert!(eta_exact(&ReuseBoundInput::new(5, 1, 0.1)).is_err());
        assert!(eta_exact(&ReuseBoundInput::new(5, 4, 1.0)).is_err());
        assert!(eta_bound(&ReuseBoundInput::new(10, 3, 0.1)).is_err());
        assert!(eta_bound(&ReuseBoundInput::new(10, 12, 0.1)).is_ok());
        let noisy = ReuseBoundInput {
            epsilon: 0.1,
            ..ReuseBoundInput::new(10, 12, 0.01)
        };
        assert!(eta_bound(&noisy).is_err());
        let mild = ReuseBoundInput { m: 6, ..noisy };
        assert!(eta_bound(&mild).is_ok());
    }

    #[test]
    fn exact_matches_enumeration_for_small_windows() {
        for k in 1..=12u64 {
            for m in 2..=k + 2 {
                for p in [rational(1, 10), rational(1, 3), rational(3, 20)] {
                    let (e1, e2, eta) = eta_exact_rational(k, m, &p).unwrap();
                    let w1 = enumerate_window(k, (m - 2) as u32, &p);
                    let w2 = enumerate_window(k, 1, &p);
                    assert_eq!(e1, w1);
                    assert_eq!(e2, w2);
                    assert_eq!(eta, w1 * w2);
                    let pf: f64 = p.numer().to_string().parse::<f64>().unwrap()
                        / p.denom().to_string().parse::<f64>().unwrap();
                    let float = eta_exact(&ReuseBoundInput::new(k, m, pf)).unwrap();
                    let exact: f64 = eta.numer().to_string().parse::<f64>().unwrap()
                        / eta.denom().to_string().parse::<f64>().unwrap();
                    assert!((float.eta - exact).abs() <= 1e-12 * exact.max(1e-300));
                }
            }
        }
    }

    #[test]
    fn log_domain_survives_underflow() {
        let e = eta_exact(&ReuseBoundInput::new(4000, 4002, 0.01)).unwrap();
        assert_eq!(e.eta, 0.0);
        assert!(e.log2_eta.is_finite() && e.log2_eta < -20000.0);
    }

    #[test]
    fn p_limit_at_full_gamma() {
        let b = eta_bound(&ReuseBoundInput::new(10, 12, 0.1)).unwrap();
        assert_eq!(format!("{:.4}", b.p_limit), "0.1554");
        assert_eq!(format!("{:.3}", b.p_limit), "0.155");
        assert!((b.p_limit - 1.0 / (2.0 * std::f64::consts::E + 1.0)).abs() < 1e-15);
        assert!(b.admissible);
        assert!(
            !eta_bound(&ReuseBoundInput::new(10, 12, 0.16))
                .unwrap()
                .admissible
        );
    }

    #[test]
    fn bound_value_for_half_gamma() {
        let b = eta_bound(&ReuseBoundInput::new(10, 7, 0.05)).unwrap();
        let direct = 10.0 / (2.0 * std::f64::consts::E) / 32.0;
        assert!((b.bound - direct).abs() < 1e-15);
        assert!((b.bound - 0.05749).abs() < 1e-5);
    }

    #[test]
    fn bound_dominates_exact_on_grid() {
        let rows = sweep(
            &[10, 20, 30, 40],
            &[0.3, 0.5, 0.75, 1.0],
            &[0.01, 0.05, 0.1, 0.15],
            0.0,
        )
        .unwrap();
        assert_eq!(rows.len(), 64);
        let admissible: Vec<_> = rows.iter().filter(|r| r.admissible).collect();
        assert!(admissible.len() > 10);
        for r in admissible {
            assert!(r.eta < r.bound, "{r:?}");
        }
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with(SWEEP_CSV_HEADER));
        assert_eq!(csv.lines().count(), 65);
    }

    #[test]
    fn exact_is_monotone_below_the_limit() {
        for (k, m) in [(10, 7), (20, 22), (40, 14)] {
            let limit = eta_bound(&ReuseBoundInput::new(k, m, 0.0)).unwrap().p_limit;
            let mut prev = 0.0;
            for i in 1..200 {
                let p = limit * i as f64 / 200.0;
                let eta = eta_exact(&ReuseBoundInput::new(k, m, p)).unwrap().eta;
                assert!(eta > prev);
                prev = eta;
            }
        }
    }

    #[test]
    fn binomial_inequality_exhaustive() {
        for n in 1..=64 {
            for k in 1..=n {
                assert!(binomial_bound_holds(n, k), "C({n},{k})");
            }
        }
    }

    fn coin(n: usize, shards: usize, seed: u64) -> Vec<(Subspace, QuantumState)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..shards)
            .map(|_| {
                let a = sample_subspace(n, n / 2, &mut rng).unwrap();
                let s = qsim::build_subspace_state(&a).unwrap();
                (a, s)
            })
            .collect()
    }

    fn cfg(rounds: u64, epsilon: f64, mode: LongevityMode, threshold: f64) -> LongevityConfig {
        LongevityConfig {
            rounds,
            epsilon,
            mode,
            wear_out_threshold: threshold,
            seed: 1,
        }
    }

    #[test]
    fn ideal_coin_never_drifts() {
        let original = coin(6, 3, 2);
        let report = run_longevity(original, &cfg(2000, 0.0, LongevityMode::Sample, 0.5)).unwrap();
        assert_eq!(report.survived_rounds, 2000);
        assert_eq!(report.cumulative_distance, 0.0);
        assert!(report.trace_distances.iter().all(|&d| d == 0.0));
        assert_eq!(report.rejected_at, None);
        assert_eq!(report.acceptance_probability, 1.0);
    }

    #[test]
    fn perturbed_rounds_respect_recovery_bound() {
        for eps in [0.01, 0.04] {
            let report = run_longevity(
                coin(8, 3, 3),
                &cfg(200, eps, LongevityMode::Postselect, 1e9),
            )
            .unwrap();
            assert_eq!(report.trace_distances.len(), 200);
            assert!(report.within_bound());
            // the rotation model saturates the bound
            assert!((report.max_distance - eps.sqrt()).abs() < 1e-9);
            let per_round = report.acceptance_probability.powf(1.0 / 200.0);
            assert!((per_round - (1.0 - eps)).abs() < 1e-9);
        }
    }

    #[test]
    fn sampled_perturbation_eventually_rejects() {
        let report =
            run_longevity(coin(4, 2, 4), &cfg(10_000, 0.2, LongevityMode::Sample, 1e9)).unwrap();
        let round = report
            .rejected_at
            .expect("a 20% rejection rate ends the run");
        assert_eq!(report.verifications, round);
        assert!(report.within_bound());
    }

    #[test]
    fn wear_out_accumulates_linearly() {
        // one shard with ε = 1e-4 moves exactly 0.01 per round
        let report = run_longevity(
            coin(6, 1, 5),
            &cfg(1000, 1e-4, LongevityMode::Postselect, 0.5),
        )
        .unwrap();
        assert!(report.survived_rounds >= 50);
        assert_eq!(report.worn_out_at, Some(51));
        assert_eq!(report.survived_rounds, 50);
    }

    #[test]
    fn longevity_domain() {
        assert!(run_longevity(coin(4, 1, 6), &cfg(0, 0.0, LongevityMode::Sample, 1.0)).is_err());
        assert!(run_longevity(Vec::new(), &cfg(1, 0.0, LongevityMode::Sample, 1.0)).is_err());
        assert!(run_longevity(coin(4, 1, 6), &cfg(1, 1.0, LongevityMode::Sample, 1.0)).is_err());
    }
}
