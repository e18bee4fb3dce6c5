//! The hidden-subspace mini-scheme over an in-process oracle registry.
//!
//! The registry plays the classical oracle: it derives serials and
//! subspaces from a public genesis seed by keyed hashing (the state
//! generator), answers serial-validity queries (the serial verifier), and
//! applies membership oracles during verification. Outside [`crate::lab`]
//! nothing hands out a registered subspace.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gf2::{sample_subspace, BitVec, Gf2Error, Subspace};
use crate::qsim::{self, MeasurementOutcome, QsimError, QuantumState, TOLERANCE};

/// Retries before `mint_m` gives up on finding an unused serial.
const MAX_RESAMPLES: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MiniError {
    #[error("security parameter must be even and in 4..=20, got {0}")]
    SecurityParameter(usize),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("serial collision: another key already owns this serial")]
    SerialCollision,
    #[error("no unused serial found after {0} resamples")]
    SerialSpaceExhausted(usize),
    #[error(transparent)]
    Qsim(#[from] QsimError),
    #[error(transparent)]
    Gf2(#[from] Gf2Error),
}

/// A classical serial number of `3n` bits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Serial {
    bits: u64,
    len: u8,
}

impl Serial {
    pub fn new(len: usize, bits: u64) -> Result<Self, MiniError> {
        if len == 0 || len > 64 || (len < 64 && bits >> len != 0) {
            return Err(MiniError::Format(format!(
                "{bits:#x} is not a {len}-bit serial"
            )));
        }
        Ok(Self {
            bits,
            len: len as u8,
        })
    }

    pub fn len(&self) -> usize {
        self.len as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    /// Big-endian bytes, `ceil(len/8)` of them.
    pub fn to_bytes(&self) -> Vec<u8> {
        let nbytes = self.len().div_ceil(8);
        self.bits.to_be_bytes()[8 - nbytes..].to_vec()
    }

    pub fn from_bytes(len: usize, bytes: &[u8]) -> Result<Self, MiniError> {
        if bytes.len() != len.div_ceil(8) || bytes.len() > 8 {
            return Err(MiniError::Format(format!(
                "{} bytes cannot hold a {len}-bit serial",
                bytes.len()
            )));
        }
        let mut buf = [0u8; 8];
        buf[8 - bytes.len()..].copy_from_slice(bytes);
        Self::new(len, u64::from_be_bytes(buf))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.to_bytes())
    }

    pub fn from_hex(len: usize, s: &str) -> Result<Self, MiniError> {
        let raw = hex::decode(s).map_err(|e| MiniError::Format(e.to_string()))?;
        Self::from_bytes(len, &raw)
    }
}

impl fmt::Display for Serial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Registered {
    pub(crate) key: Option<BitVec>,
    pub(crate) subspace: Subspace,
}

/// Trusted stand-in for the classical oracle.
#[derive(Debug)]
pub struct OracleRegistry {
    seed: [u8; 32],
    n: usize,
    table: RwLock<HashMap<Serial, Registered>>,
    queries: AtomicU64,
}

fn check_security_parameter(n: usize) -> Result<(), MiniError> {
    if !(4..=20).contains(&n) || !n.is_multiple_of(2) {
        return Err(MiniError::SecurityParameter(n));
    }
    Ok(())
}

impl OracleRegistry {
    pub fn new(n: usize, seed: [u8; 32]) -> Result<Self, MiniError> {
        check_security_parameter(n)?;
        Ok(Self {
            seed,
            n,
            table: RwLock::new(HashMap::new()),
            queries: AtomicU64::new(0),
        })
    }

    /// Expands a short seed into the 256-bit genesis value.
    pub fn from_u64_seed(n: usize, seed: u64) -> Result<Self, MiniError> {
        let mut h = Sha256::new();
        h.update(b"qbtc/genesis");
        h.update(seed.to_be_bytes());
        Self::new(n, h.finalize().into())
    }

    pub fn security_parameter(&self) -> usize {
        self.n
    }

    pub fn serial_len(&self) -> usize {
        3 * self.n
    }

    pub fn genesis_seed(&self) -> [u8; 32] {
        self.seed
    }

    /// Oracle queries answered so far.
    pub fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    pub fn registered_count(&self) -> usize {
        self.table.read().expect("registry lock").len()
    }

    fn derive(&self, tag: &[u8], key: &BitVec) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(tag);
        h.update(self.seed);
        h.update([self.n as u8]);
        h.update(key.bits().to_be_bytes());
        h.finalize().into()
    }

    fn serial_for(&self, key: &BitVec) -> Serial {
        let digest = self.derive(b"qbtc/G/serial", key);
        let mut head = [0u8; 8];
        head.copy_from_slice(&digest[..8]);
        let len = self.serial_len();
        Serial {
            bits: u64::from_be_bytes(head) >> (64 - len),
            len: len as u8,
        }
    }

    /// The state generator: maps an `n`-bit key to its serial and a
    /// subspace of dimension `n/2`, registering the pair. Deterministic in
    /// (seed, key).
    pub fn generate_state(&self, key: &BitVec) -> Result<(Serial, Subspace), MiniError> {
        if key.len() != self.n {
            return Err(MiniError::Format(format!(
                "key has {} bits, expected {}",
                key.len(),
                self.n
            )));
        }
        let serial = self.serial_for(key);
        let mut rng = ChaCha20Rng::from_seed(self.derive(b"qbtc/G/subspace", key));
        let subspace = sample_subspace(self.n, self.n / 2, &mut rng)?;
        let mut table = self.table.write().expect("registry lock");
        if let Some(existing) = table.get(&serial) {
            return match existing.key {
                Some(k) if k == *key => Ok((serial, subspace)),
                _ => Err(MiniError::SerialCollision),
            };
        }
        table.insert(
            serial,
            Registered {
                key: Some(*key),
                subspace: subspace.clone(),
            },
        );
        Ok((serial, subspace))
    }

    /// The serial verifier. Counts as one oracle query.
    pub fn verify_serial(&self, serial: &Serial) -> Result<bool, MiniError> {
        if serial.len() != self.serial_len() {
            return Err(MiniError::Format(format!(
                "serial has {} bits, expected {}",
                serial.len(),
                self.serial_len()
            )));
        }
        self.queries.fetch_add(1, Ordering::Relaxed);
        Ok(self
            .table
            .read()
            .expect("registry lock")
            .contains_key(serial))
    }

    /// Runs `f` with the registered subspace; counts as one query.
    fn with_oracle<T>(
        &self,
        serial: &Serial,
        f: impl FnOnce(&Subspace) -> Result<T, MiniError>,
    ) -> Result<Option<T>, MiniError> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        let table = self.table.read().expect("registry lock");
        table.get(serial).map(|r| f(&r.subspace)).transpose()
    }

    pub(crate) fn lookup_registered(&self, serial: &Serial) -> Option<Registered> {
        self.table
            .read()
            .expect("registry lock")
            .get(serial)
            .cloned()
    }

    pub(crate) fn insert_registered(&self, serial: Serial, subspace: Subspace) {
        self.table.write().expect("registry lock").insert(
            serial,
            Registered {
                key: None,
                subspace,
            },
        );
    }

    pub(crate) fn all_registered(&self) -> Vec<(Serial, Subspace)> {
        let mut rows: Vec<_> = self
            .table
            .read()
            .expect("registry lock")
            .iter()
            .map(|(s, r)| (*s, r.subspace.clone()))
            .collect();
        rows.sort_by_key(|(s, _)| *s);
        rows
    }
}

/// An unsigned mini-scheme coin `(s, ρ)`.
#[derive(Debug)]
pub struct MiniCoin {
    pub serial: Serial,
    pub state: QuantumState,
}

/// Draws a fresh key, generates and registers its state, and returns the
/// key alongside the coin. Keys whose serial is already registered (a
/// collision, or a key drawn before) are resampled.
pub(crate) fn mint_m_with_key<R: Rng + ?Sized>(
    registry: &OracleRegistry,
    rng: &mut R,
) -> Result<(MiniCoin, BitVec), MiniError> {
    for _ in 0..MAX_RESAMPLES {
        if registry.registered_count() >= 1 << registry.n {
            break;
        }
        let key = BitVec::random(registry.n, rng)?;
        if registry
            .lookup_registered(&registry.serial_for(&key))
            .is_some()
        {
            continue;
        }
        match registry.generate_state(&key) {
            Ok((serial, subspace)) => {
                let state = qsim::build_subspace_state(&subspace)?;
                return Ok((MiniCoin { serial, state }, key));
            }
            Err(MiniError::SerialCollision) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(MiniError::SerialSpaceExhausted(MAX_RESAMPLES))
}

/// Mints a mini-scheme coin. The key and subspace stay in the registry.
pub fn mint_m<R: Rng + ?Sized>(
    registry: &OracleRegistry,
    rng: &mut R,
) -> Result<MiniCoin, MiniError> {
    mint_m_with_key(registry, rng).map(|(coin, _)| coin)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiniStage {
    Form,
    Serial,
    Quantum,
}

impl fmt::Display for MiniStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MiniStage::Form => "form",
            MiniStage::Serial => "serial",
            MiniStage::Quantum => "quantum",
        })
    }
}

/// Outcome of the staged mini-scheme verifier.
#[derive(Debug, Clone, PartialEq)]
pub enum MiniVerdict {
    /// A classical stage failed; the state was not measured.
    Rejected(MiniStage),
    /// The verifier ran; `accepted` is false when the branch is impossible.
    Measured(MeasurementOutcome),
}

impl MiniVerdict {
    pub fn accepted(&self) -> bool {
        matches!(self, MiniVerdict::Measured(o) if o.accepted)
    }

    pub fn probability(&self) -> f64 {
        match self {
            MiniVerdict::Rejected(_) => 0.0,
            MiniVerdict::Measured(o) => o.probability,
        }
    }

    pub fn rejected_at(&self) -> Option<MiniStage> {
        match self {
            MiniVerdict::Rejected(stage) => Some(*stage),
            MiniVerdict::Measured(o) if !o.accepted => Some(MiniStage::Quantum),
            MiniVerdict::Measured(_) => None,
        }
    }
}

fn form_ok(registry: &OracleRegistry, serial: &Serial, state: &QuantumState) -> bool {
    serial.len() == registry.serial_len()
        && state.num_qubits() == registry.n
        && (state.norm_sqr() - 1.0).abs() <= TOLERANCE
}

/// Staged verification returning the analytic acceptance probability.
pub fn verify_m(registry: &OracleRegistry, serial: &Serial, state: &QuantumState) -> MiniVerdict {
    if !form_ok(registry, serial, state) {
        return MiniVerdict::Rejected(MiniStage::Form);
    }
    if !matches!(registry.verify_serial(serial), Ok(true)) {
        return MiniVerdict::Rejected(MiniStage::Serial);
    }
    match registry.with_oracle(serial, |a| Ok(qsim::verify_state(a, state)?)) {
        Ok(Some(outcome)) => MiniVerdict::Measured(outcome),
        _ => MiniVerdict::Rejected(MiniStage::Quantum),
    }
}

/// Staged verification with a sampled measurement. Returns the stage that
/// failed, if any, and the post-measurement state. Classical failures
/// hand the state back untouched.
pub fn verify_m_sampled<R: Rng + ?Sized>(
    registry: &OracleRegistry,
    serial: &Serial,
    state: QuantumState,
    rng: &mut R,
) -> (Result<(), MiniStage>, QuantumState) {
    if !form_ok(registry, serial, &state) {
        return (Err(MiniStage::Form), state);
    }
    if !matches!(registry.verify_serial(serial), Ok(true)) {
        return (Err(MiniStage::Serial), state);
    }
    match registry.with_oracle(serial, |a| Ok(qsim::sample_verify(a, &state, rng)?)) {
        Ok(Some((true, post))) => (Ok(()), post),
        Ok(Some((false, post))) => (Err(MiniStage::Quantum), post),
        _ => (Err(MiniStage::Quantum), state),
    }
}

/// Double verifier: both alleged copies must pass, sequentially.
pub fn verify_2<R: Rng + ?Sized>(
    registry: &OracleRegistry,
    serial: &Serial,
    first: QuantumState,
    second: QuantumState,
    rng: &mut R,
) -> bool {
    verify_m_sampled(registry, serial, first, rng).0.is_ok()
        && verify_m_sampled(registry, serial, second, rng).0.is_ok()
}

/// Probability that [`verify_2`] accepts the given pair of copies.
pub fn verify_2_probability(
    registry: &OracleRegistry,
    serial: &Serial,
    first: &QuantumState,
    second: &QuantumState,
) -> f64 {
    verify_m(registry, serial, first).probability()
        * verify_m(registry, serial, second).probability()
}

/// Number of candidates the verifier accepts, measured in order.
pub fn count_accepting<R: Rng + ?Sized>(
    registry: &OracleRegistry,
    candidates: Vec<(Serial, QuantumState)>,
    rng: &mut R,
) -> usize {
    candidates
        .into_iter()
        .map(|(s, st)| verify_m_sampled(registry, &s, st, rng).0.is_ok())
        .filter(|ok| *ok)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qsim::{clone_attempt_lab, CloneStrategy};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn registry(n: usize, seed: u64) -> OracleRegistry {
        OracleRegistry::from_u64_seed(n, seed).unwrap()
    }

    #[test]
    fn generate_is_deterministic() {
        let reg = registry(8, 1);
        let key = BitVec::new(8, 0x5a).unwrap();
        let (s1, a1) = reg.generate_state(&key).unwrap();
        let (s2, a2) = reg.generate_state(&key).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(a1, a2);
        assert_eq!(a1.generators().len(), 4);
        assert_eq!(s1.len(), 24);
        // a second registry with the same genesis agrees
        assert_eq!(registry(8, 1).generate_state(&key).unwrap(), (s1, a1));
    }

    #[test]
    fn distinct_keys_give_distinct_serials() {
        let reg = registry(8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut by_serial: HashMap<Serial, BitVec> = HashMap::new();
        for _ in 0..10_000 {
            let key = BitVec::random(8, &mut rng).unwrap();
            let (serial, _) = reg.generate_state(&key).unwrap();
            assert_eq!(*by_serial.entry(serial).or_insert(key), key);
        }
        assert_eq!(by_serial.len(), reg.registered_count());
    }

    #[test]
    fn colliding_key_is_refused_and_mint_retries() {
        // search for a genesis seed where two 4-bit keys share a 12-bit serial
        let (reg, a, b) = (0u64..)
            .find_map(|seed| {
                let reg = registry(4, seed);
                let mut seen: HashMap<Serial, u32> = HashMap::new();
                for k in 0u32..16 {
                    let s = reg.serial_for(&BitVec::new(4, k).unwrap());
                    if let Some(&prev) = seen.get(&s) {
                        return Some((reg, prev, k));
                    }
                    seen.insert(s, k);
                }
                None
            })
            .unwrap();
        reg.generate_state(&BitVec::new(4, a).unwrap()).unwrap();
        assert_eq!(
            reg.generate_state(&BitVec::new(4, b).unwrap()).unwrap_err(),
            MiniError::SerialCollision
        );
        // 15 distinct serials exist; `a` holds one of them
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..14 {
            let coin = mint_m(&reg, &mut rng).unwrap();
            assert!(verify_m(&reg, &coin.serial, &coin.state).accepted());
        }
        assert_eq!(reg.registered_count(), 15);
        assert!(matches!(
            mint_m(&reg, &mut rng),
            Err(MiniError::SerialSpaceExhausted(_))
        ));
    }

    #[test]
    fn serial_verifier() {
        let reg = registry(6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let coin = mint_m(&reg, &mut rng).unwrap();
        assert_eq!(reg.query_count(), 0);
        assert!(reg.verify_serial(&coin.serial).unwrap());
        assert_eq!(reg.query_count(), 1);
        let other = (0u64..)
            .map(|b| Serial::new(18, b).unwrap())
            .find(|s| *s != coin.serial)
            .unwrap();
        assert!(!reg.verify_serial(&other).unwrap());
        assert_eq!(reg.query_count(), 2);
        assert!(reg.verify_serial(&Serial::new(17, 0).unwrap()).is_err());
    }

    #[test]
    fn mint_and_verify() {
        let reg = registry(8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = mint_m(&reg, &mut rng).unwrap();
        let b = mint_m(&reg, &mut rng).unwrap();
        assert_ne!(a.serial, b.serial);
        let mut seen = HashSet::from([a.serial, b.serial]);
        for _ in 2..256 {
            assert!(seen.insert(mint_m(&reg, &mut rng).unwrap().serial));
        }
        assert!(matches!(
            mint_m(&reg, &mut rng),
            Err(MiniError::SerialSpaceExhausted(_))
        ));
        assert_eq!(a.serial.len(), 24);
        let before = reg.query_count();
        let verdict = verify_m(&reg, &a.serial, &a.state);
        assert!(verdict.accepted());
        assert!((verdict.probability() - 1.0).abs() < 1e-12);
        assert_eq!(reg.query_count() - before, 2);
        assert!(OracleRegistry::from_u64_seed(5, 0).is_err());
        assert!(OracleRegistry::from_u64_seed(22, 0).is_err());
    }

    #[test]
    fn verifier_stages() {
        let reg = registry(4, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coin = mint_m(&reg, &mut rng).unwrap();

        // unregistered serial stops at stage two and leaves the state alone
        let bogus = (0u64..4096)
            .map(|b| Serial::new(12, b).unwrap())
            .find(|s| !reg.verify_serial(s).unwrap())
            .unwrap();
        let before = reg.query_count();
        assert_eq!(
            verify_m(&reg, &bogus, &coin.state),
            MiniVerdict::Rejected(MiniStage::Serial)
        );
        assert_eq!(reg.query_count() - before, 1);
        let (res, back) = verify_m_sampled(&reg, &bogus, coin.state.clone(), &mut rng);
        assert_eq!(res, Err(MiniStage::Serial));
        assert_eq!(back, coin.state);

        // wrong qubit count fails the form check without any query
        let before = reg.query_count();
        let wide = QuantumState::basis(6, 0).unwrap();
        assert_eq!(
            verify_m(&reg, &coin.serial, &wide),
            MiniVerdict::Rejected(MiniStage::Form)
        );
        assert_eq!(reg.query_count(), before);
        let sentinel = QuantumState::zero_sentinel(4).unwrap();
        assert_eq!(
            verify_m(&reg, &coin.serial, &sentinel).rejected_at(),
            Some(MiniStage::Form)
        );
    }

    #[test]
    fn independent_subspace_state_passes_with_overlap_probability() {
        let reg = registry(4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let coin = mint_m(&reg, &mut rng).unwrap();
        let a = reg.lookup_registered(&coin.serial).unwrap().subspace;
        for _ in 0..20 {
            let b = sample_subspace(4, 2, &mut rng).unwrap();
            // brute force |⟨A|B⟩|² = |A∩B|² / (|A||B|)
            let meet = a
                .member_indices()
                .unwrap()
                .into_iter()
                .filter(|&x| b.contains_index(x))
                .count() as f64;
            let expected = meet * meet / 16.0;
            let st = qsim::build_subspace_state(&b).unwrap();
            let got = verify_m(&reg, &coin.serial, &st).probability();
            assert!((got - expected).abs() < 1e-9);
            if meet == 1.0 {
                assert!((got - 1.0 / 16.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn double_verifier_and_count() {
        let reg = registry(8, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let coin = mint_m(&reg, &mut rng).unwrap();
        let a = reg.lookup_registered(&coin.serial).unwrap().subspace;
        let fresh = qsim::build_subspace_state(&a).unwrap();
        assert!(verify_2(
            &reg,
            &coin.serial,
            coin.state.clone(),
            fresh.clone(),
            &mut rng
        ));
        let other = mint_m(&reg, &mut rng).unwrap();
        assert!(!verify_2(
            &reg,
            &other.serial,
            coin.state.clone(),
            fresh.clone(),
            &mut rng
        ));

        let (c1, c2) =
            clone_attempt_lab(&coin.state, CloneStrategy::MeasureComputational, &mut rng).unwrap();
        let p = verify_2_probability(&reg, &coin.serial, &c1, &c2);
        assert!((p - 1.0 / 256.0).abs() < 1e-9);

        let honest: Vec<_> = (0..5)
            .map(|_| {
                let c = mint_m(&reg, &mut rng).unwrap();
                (c.serial, c.state)
            })
            .collect();
        assert_eq!(count_accepting(&reg, honest, &mut rng), 5);
        assert_eq!(count_accepting(&reg, Vec::new(), &mut rng), 0);
    }

    #[test]
    fn serial_bytes_roundtrip() {
        let s = Serial::new(24, 0xabcdef).unwrap();
        assert_eq!(s.to_bytes(), vec![0xab, 0xcd, 0xef]);
        assert_eq!(Serial::from_hex(24, &s.to_hex()).unwrap(), s);
        assert!(Serial::new(24, 1 << 24).is_err());
        assert!(Serial::from_bytes(24, &[1, 2]).is_err());
        let wide = Serial::new(60, (1 << 60) - 1).unwrap();
        assert_eq!(Serial::from_bytes(60, &wide.to_bytes()).unwrap(), wide);
    }
}
