//! The full scheme: naive single-ledger coins, two-stage shard → coin
//! mining, composite verification and custody of coin states.

use std::collections::{HashMap, VecDeque};
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{self, Chain, EntryTag, LedgerEntry, LedgerError};
use crate::minischeme::{self, MiniError, OracleRegistry, Serial};
use crate::qsim::{QuantumState, TOLERANCE};
use crate::sigs::{self, KeyPair, PublicKey, SigError, Signature};

/// Attempts before minting gives up on ledger serial collisions.
const MAX_MINT_RETRIES: usize = 64;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("only {fresh} fresh shards available, {needed} needed")]
    InsufficientFreshShards { fresh: usize, needed: usize },
    #[error("shard {0} was already combined into a coin")]
    DescriptorConflict(String),
    #[error("supply cap of {0} coins reached")]
    SupplyCapReached(u64),
    #[error("custody token is stale or unknown")]
    CustodyViolation,
    #[error("gave up after {0} ledger collisions")]
    RetriesExhausted(usize),
    #[error(transparent)]
    Mini(#[from] MiniError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Sig(#[from] SigError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub n: usize,
    pub m: usize,
    pub t_max: u64,
    pub t_block: u64,
    /// Defaults to 1/(2m) when unset.
    pub lambda: Option<f64>,
    pub epsilon: f64,
    pub supply_cap: u64,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            n: 8,
            m: 7,
            t_max: 6000,
            t_block: 600,
            lambda: None,
            epsilon: 0.0,
            supply_cap: 1_000_000,
            seed: 0,
        }
    }
}

impl ProtocolConfig {
    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or(1.0 / (2.0 * self.m as f64))
    }

    /// Blocks per attack window, ⌊T_max / T_block⌋.
    pub fn k(&self) -> u64 {
        self.t_max / self.t_block.max(1)
    }

    /// Minimum number of passing shards, ⌈(1 − ε − λ)·m⌉.
    pub fn threshold(&self) -> usize {
        let exact = (1.0 - self.epsilon - self.lambda()) * self.m as f64;
        (exact - TOLERANCE).ceil().max(0.0) as usize
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let bad = |msg: String| Err(ProtocolError::Config(msg));
        if !self.n.is_multiple_of(2) || !(4..=20).contains(&self.n) {
            return bad(format!("n must be even and in 4..=20, got {}", self.n));
        }
        if self.m == 0 {
            return bad("m must be at least 1".into());
        }
        if self.t_max == 0 || self.t_block == 0 {
            return bad("t_max and t_block must be positive".into());
        }
        let lambda = self.lambda();
        if !(0.0..1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must lie in [0, 1), got {}", self.epsilon));
        }
        if !(lambda > 0.0 && lambda < 1.0 - self.epsilon) {
            return bad(format!("lambda must lie in (0, 1 - epsilon), got {lambda}"));
        }
        if ((1.0 - self.epsilon - lambda) * self.m as f64 + TOLERANCE).floor() < 1.0 {
            return bad(format!(
                "floor((1 - epsilon - lambda) * m) must be at least 1 (m = {}, lambda = {lambda})",
                self.m
            ));
        }
        if self.k() < 3 {
            return bad(format!(
                "floor(t_max / t_block) must be at least 3, got {}",
                self.k()
            ));
        }
        Ok(())
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ProtocolError> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ProtocolError> {
            v.parse()
                .map_err(|_| ProtocolError::Config(format!("bad value for {key}: {v:?}")))
        }
        match key {
            "n" => self.n = num(key, value)?,
            "m" => self.m = num(key, value)?,
            "t_max" => self.t_max = num(key, value)?,
            "t_block" => self.t_block = num(key, value)?,
            "lambda" => self.lambda = Some(num(key, value)?),
            "epsilon" => self.epsilon = num(key, value)?,
            "supply_cap" => self.supply_cap = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => return Err(ProtocolError::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` text over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ProtocolError> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                ProtocolError::Config(format!("line {}: expected key = value", no + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "n = {}\nm = {}\nt_max = {}\nt_block = {}\n",
            self.n, self.m, self.t_max, self.t_block
        );
        if let Some(l) = self.lambda {
            out.push_str(&format!("lambda = {l}\n"));
        }
        out.push_str(&format!(
            "epsilon = {}\nsupply_cap = {}\nseed = {}\n",
            self.epsilon, self.supply_cap, self.seed
        ));
        out
    }
}

pub fn keygen_q<R: Rng + ?Sized>(
    config: &ProtocolConfig,
    rng: &mut R,
) -> Result<KeyPair, ProtocolError> {
    Ok(sigs::keygen(config.n, rng)?)
}

/// A signed single-subspace coin `(s, ρ, σ)`. Used both as a naive coin
/// and as a shard of a composite coin.
#[derive(Debug)]
pub struct QuantumShard {
    pub serial: Serial,
    pub state: QuantumState,
    pub signature: Signature,
    /// Timestamp of the block recording the serial.
    pub mint_time: u64,
}

/// A signed shard whose ledger entry has not been sealed yet.
#[derive(Debug)]
pub struct PendingShard {
    shard: QuantumShard,
    entry: LedgerEntry,
}

impl PendingShard {
    pub fn serial(&self) -> Serial {
        self.shard.serial
    }

    pub fn entry(&self) -> LedgerEntry {
        self.entry.clone()
    }

    /// Completes the shard once its entry is sealed at `block_time`.
    pub fn finalize(mut self, block_time: u64) -> QuantumShard {
        self.shard.mint_time = block_time;
        self.shard
    }
}

/// Mints a mini-scheme coin and signs its serial with a fresh one-time
/// key. The private key is dropped on return.
pub fn prepare_shard<R: Rng + ?Sized>(
    registry: &OracleRegistry,
    config: &ProtocolConfig,
    rng: &mut R,
) -> Result<PendingShard, ProtocolError> {
    let coin = minischeme::mint_m(registry, rng)?;
    let keys = keygen_q(config, rng)?;
    let serial_bytes = coin.serial.to_bytes();
    let signature = keys.private_key.sign(&serial_bytes)?;
    Ok(PendingShard {
        entry: LedgerEntry::new(
            EntryTag::Shard,
            serial_bytes,
            keys.public_key.as_bytes().to_vec(),
        ),
        shard: QuantumShard {
            serial: coin.serial,
            state: coin.state,
            signature,
            mint_time: 0,
        },
    })
}

/// Naive minting: the serial is recorded directly, restarting with a new
/// state whenever the ledger already holds the serial.
pub fn mint_naive<R: Rng + ?Sized>(
    chain: &mut Chain,
    registry: &OracleRegistry,
    config: &ProtocolConfig,
    now: u64,
    rng: &mut R,
) -> Result<QuantumShard, ProtocolError> {
    for _ in 0..MAX_MINT_RETRIES {
        let pending = prepare_shard(registry, config, rng)?;
        match chain.append(pending.entry(), now, rng) {
            Ok(block) => {
                let t = block.timestamp;
                return Ok(pending.finalize(t));
            }
            Err(LedgerError::DuplicateSerial { .. }) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(ProtocolError::RetriesExhausted(MAX_MINT_RETRIES))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Form,
    DescriptorLookup,
    DescriptorSignature,
    Lookup,
    Signature,
    Quantum,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Form => "form",
            Stage::DescriptorLookup => "descriptor-lookup",
            Stage::DescriptorSignature => "descriptor-signature",
            Stage::Lookup => "lookup",
            Stage::Signature => "signature",
            Stage::Quantum => "quantum",
        })
    }
}

fn public_key_of(chain: &Chain, tag: EntryTag, key: &[u8]) -> Option<PublicKey> {
    chain
        .lookup(tag, key)
        .ok()
        .and_then(|found| PublicKey::from_bytes(&found.public_key))
}

fn shard_form_ok(registry: &OracleRegistry, shard: &QuantumShard) -> bool {
    shard.serial.len() == registry.serial_len()
        && shard.state.num_qubits() == registry.security_parameter()
        && (shard.state.norm_sqr() - 1.0).abs() <= TOLERANCE
}

/// Classical checks for one shard: ledger lookup, then its signature.
fn check_shard_classical(chain: &Chain, shard: &QuantumShard) -> Result<(), Stage> {
    let bytes = shard.serial.to_bytes();
    let key = public_key_of(chain, EntryTag::Shard, &bytes).ok_or(Stage::Lookup)?;
    if !sigs::verify_sig(&key, &bytes, &shard.signature) {
        return Err(Stage::Signature);
    }
    Ok(())
}

/// Measures the shard's state in place, keeping the post-measurement state.
fn measure_shard<R: Rng + ?Sized>(
    registry: &OracleRegistry,
    shard: &mut QuantumShard,
    rng: &mut R,
) -> bool {
    let n = shard.state.num_qubits();
    let state = std::mem::replace(
        &mut shard.state,
        QuantumState::zero_sentinel(n).expect("valid qubit count"),
    );
    let (result, post) = minischeme::verify_m_sampled(registry, &shard.serial, state, rng);
    shard.state = post;
    result.is_ok()
}

/// Naive verification: form, lookup, signature, then the quantum check.
/// The state is measured only if every classical stage passes.
pub fn verify_naive<R: Rng + ?Sized>(
    chain: &Chain,
    registry: &OracleRegistry,
    candidate: &mut QuantumShard,
    rng: &mut R,
) -> Result<(), Stage> {
    if !shard_form_ok(registry, candidate) {
        return Err(Stage::Form);
    }
    check_shard_classical(chain, candidate)?;
    if measure_shard(registry, candidate, rng) {
        Ok(())
    } else {
        Err(Stage::Quantum)
    }
}

/// Shards offered for sale, oldest first.
#[derive(Debug, Default)]
pub struct Marketplace {
    queue: VecDeque<QuantumShard>,
}

impl Marketplace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn publish(&mut self, shard: QuantumShard) {
        self.queue.push_back(shard);
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    pub fn serials(&self) -> impl Iterator<Item = Serial> + '_ {
        self.queue.iter().map(|s| s.serial)
    }

    /// Shards that would currently pass the freshness rule.
    pub fn fresh_count(&self, chain: &Chain, config: &ProtocolConfig, now: u64) -> usize {
        self.queue
            .iter()
            .filter(|s| is_fresh(chain, config, s, now))
            .count()
    }

    fn restore(&mut self, shards: Vec<QuantumShard>) {
        for s in shards.into_iter().rev() {
            self.queue.push_front(s);
        }
    }
}

/// t − T ≤ T_max, with T read from the shard ledger.
fn is_fresh(chain: &Chain, config: &ProtocolConfig, shard: &QuantumShard, now: u64) -> bool {
    chain
        .lookup(EntryTag::Shard, &shard.serial.to_bytes())
        .is_ok_and(|found| now.saturating_sub(found.timestamp) <= config.t_max)
}

/// Mints a shard into the ledger and publishes it.
pub fn mint_shard<R: Rng + ?Sized>(
    chain: &mut Chain,
    registry: &OracleRegistry,
    config: &ProtocolConfig,
    market: &mut Marketplace,
    now: u64,
    rng: &mut R,
) -> Result<Serial, ProtocolError> {
    let shard = mint_naive(chain, registry, config, now, rng)?;
    let serial = shard.serial;
    market.publish(shard);
    Ok(serial)
}

/// A composite coin: `m` shards plus the signature over their descriptor.
#[derive(Debug)]
pub struct QuantumBitcoin {
    pub shards: Vec<QuantumShard>,
    pub descriptor_signature: Signature,
}

impl QuantumBitcoin {
    /// Length-prefixed shard serials, in shard order.
    pub fn descriptor(&self) -> Vec<u8> {
        descriptor_of(&self.shards)
    }
}

fn descriptor_of(shards: &[QuantumShard]) -> Vec<u8> {
    let serials: Vec<Vec<u8>> = shards.iter().map(|s| s.serial.to_bytes()).collect();
    ledger::encode_descriptor(&serials)
}

/// A coin whose descriptor entry has not been sealed yet.
#[derive(Debug)]
pub struct PendingCoin {
    coin: QuantumBitcoin,
    entry: LedgerEntry,
}

impl PendingCoin {
    pub fn entry(&self) -> LedgerEntry {
        self.entry.clone()
    }

    pub fn finalize(self, vault: &mut Vault, owner: &str) -> CustodyToken {
        vault.deposit(self.coin, owner)
    }

    /// Returns the shards to the front of the market.
    pub fn abandon(self, market: &mut Marketplace) {
        market.restore(self.coin.shards);
    }

    /// Drops the shard that conflicted and returns the others.
    fn abandon_except(self, market: &mut Marketplace, conflicted: &[u8]) {
        let keep = self
            .coin
            .shards
            .into_iter()
            .filter(|s| s.serial.to_bytes() != conflicted)
            .collect();
        market.restore(keep);
    }
}

/// Buys `m` fresh shards (oldest first) and signs their descriptor.
///
/// Stale shards and shards failing the pre-purchase check leave the
/// market; if fewer than `m` remain the purchased ones are put back.
pub fn prepare_coin<R: Rng + ?Sized>(
    chain: &Chain,
    registry: &OracleRegistry,
    config: &ProtocolConfig,
    market: &mut Marketplace,
    now: u64,
    rng: &mut R,
) -> Result<PendingCoin, ProtocolError> {
    config.validate()?;
    if chain.count_active(EntryTag::Bitcoin) as u64 >= config.supply_cap {
        return Err(ProtocolError::SupplyCapReached(config.supply_cap));
    }
    let mut picked = Vec::with_capacity(config.m);
    let mut skipped = VecDeque::new();
    while picked.len() < config.m {
        let Some(mut shard) = market.queue.pop_front() else {
            break;
        };
        if !is_fresh(chain, config, &shard, now) {
            // an unrecorded shard may still appear on the chain later
            if chain
                .lookup(EntryTag::Shard, &shard.serial.to_bytes())
                .is_err()
            {
                skipped.push_back(shard);
            }
            continue;
        }
        if measure_shard(registry, &mut shard, rng) {
            picked.push(shard);
        }
    }
    for s in skipped.into_iter().rev() {
        market.queue.push_front(s);
    }
    if picked.len() < config.m {
        let fresh = picked.len();
        market.restore(picked);
        return Err(ProtocolError::InsufficientFreshShards {
            fresh,
            needed: config.m,
        });
    }
    let keys = keygen_q(config, rng)?;
    let descriptor = descriptor_of(&picked);
    let descriptor_signature = keys.private_key.sign(&descriptor)?;
    Ok(PendingCoin {
        entry: LedgerEntry::new(
            EntryTag::Bitcoin,
            descriptor,
            keys.public_key.as_bytes().to_vec(),
        ),
        coin: QuantumBitcoin {
            shards: picked,
            descriptor_signature,
        },
    })
}

/// Combines `m` fresh shards into a coin recorded under the Bitcoin tag
/// and deposits it in `vault`.
#[allow(clippy::too_many_arguments)]
pub fn mint_bitcoin<R: Rng + ?Sized>(
    chain: &mut Chain,
    registry: &OracleRegistry,
    config: &ProtocolConfig,
    market: &mut Marketplace,
    vault: &mut Vault,
    owner: &str,
    now: u64,
    rng: &mut R,
) -> Result<CustodyToken, ProtocolError> {
    let pending = prepare_coin(chain, registry, config, market, now, rng)?;
    match chain.append(pending.entry(), now, rng) {
        Ok(_) => Ok(pending.finalize(vault, owner)),
        Err(LedgerError::DescriptorConflict(serial_hex)) => {
            let raw = hex::decode(&serial_hex).unwrap_or_default();
            pending.abandon_except(market, &raw);
            Err(ProtocolError::DescriptorConflict(serial_hex))
        }
        Err(e) => {
            pending.abandon(market);
            Err(e.into())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShardReport {
    pub serial: String,
    /// `None` when a classical stage stopped verification first.
    pub quantum_passed: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub accepted: bool,
    pub rejected_at: Option<Stage>,
    pub passed: usize,
    pub threshold: usize,
    pub shards: Vec<ShardReport>,
}

/// Composite verification. All classical stages run before any state is
/// measured; then every shard is verified and at least
/// [`ProtocolConfig::threshold`] must pass. Post-measurement states stay
/// in the coin.
pub fn verify_q<R: Rng + ?Sized>(
    chain: &Chain,
    registry: &OracleRegistry,
    config: &ProtocolConfig,
    coin: &mut QuantumBitcoin,
    rng: &mut R,
) -> VerifyReport {
    let threshold = config.threshold();
    let mut report = VerifyReport {
        accepted: false,
        rejected_at: None,
        passed: 0,
        threshold,
        shards: coin
            .shards
            .iter()
            .map(|s| ShardReport {
                serial: s.serial.to_hex(),
                quantum_passed: None,
            })
            .collect(),
    };
    let classical = (|| {
        if coin.shards.len() != config.m || !coin.shards.iter().all(|s| shard_form_ok(registry, s))
        {
            return Err(Stage::Form);
        }
        let descriptor = coin.descriptor();
        let key =
            public_key_of(chain, EntryTag::Bitcoin, &descriptor).ok_or(Stage::DescriptorLookup)?;
        if !sigs::verify_sig(&key, &descriptor, &coin.descriptor_signature) {
            return Err(Stage::DescriptorSignature);
        }
        coin.shards
            .iter()
            .try_for_each(|s| check_shard_classical(chain, s))
    })();
    if let Err(stage) = classical {
        report.rejected_at = Some(stage);
        return report;
    }
    for (shard, entry) in coin.shards.iter_mut().zip(&mut report.shards) {
        let ok = measure_shard(registry, shard, rng);
        entry.quantum_passed = Some(ok);
        report.passed += usize::from(ok);
    }
    report.accepted = report.passed >= threshold;
    if !report.accepted {
        report.rejected_at = Some(Stage::Quantum);
    }
    report
}

/// Exclusive handle to a coin held in a [`Vault`]. Tokens can be written
/// out and read back, but only the latest generation is honored.
#[derive(Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CustodyToken {
    coin_id: u64,
    generation: u64,
    owner: String,
}

impl CustodyToken {
    pub fn coin_id(&self) -> u64 {
        self.coin_id
    }

    pub fn owner(&self) -> &str {
        &self.owner
    }
}

#[derive(Debug)]
struct Held {
    coin: QuantumBitcoin,
    generation: u64,
}

/// Holds coin states; the only way to reach them is a live token.
#[derive(Debug, Default)]
pub struct Vault {
    coins: HashMap<u64, Held>,
    next_id: u64,
}

impl Vault {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.coins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coins.is_empty()
    }

    pub fn deposit(&mut self, coin: QuantumBitcoin, owner: &str) -> CustodyToken {
        let id = self.next_id;
        self.next_id += 1;
        self.coins.insert(
            id,
            Held {
                coin,
                generation: 0,
            },
        );
        CustodyToken {
            coin_id: id,
            generation: 0,
            owner: owner.to_string(),
        }
    }

    pub fn is_live(&self, token: &CustodyToken) -> bool {
        self.coins
            .get(&token.coin_id)
            .is_some_and(|h| h.generation == token.generation)
    }

    fn held(&mut self, token: &CustodyToken) -> Result<&mut Held, ProtocolError> {
        match self.coins.get_mut(&token.coin_id) {
            Some(h) if h.generation == token.generation => Ok(h),
            _ => Err(ProtocolError::CustodyViolation),
        }
    }

    pub fn coin(&mut self, token: &CustodyToken) -> Result<&mut QuantumBitcoin, ProtocolError> {
        Ok(&mut self.held(token)?.coin)
    }

    /// Consumes `token` and issues the next generation to `new_owner`.
    /// No ledger write happens.
    pub fn transfer(
        &mut self,
        token: CustodyToken,
        new_owner: &str,
    ) -> Result<CustodyToken, ProtocolError> {
        let held = self.held(&token)?;
        held.generation += 1;
        Ok(CustodyToken {
            coin_id: token.coin_id,
            generation: held.generation,
            owner: new_owner.to_string(),
        })
    }

    /// Removes the coin from custody, e.g. to export it.
    pub fn withdraw(&mut self, token: CustodyToken) -> Result<QuantumBitcoin, ProtocolError> {
        self.held(&token)?;
        Ok(self
            .coins
            .remove(&token.coin_id)
            .expect("checked above")
            .coin)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab;
    use crate::ledger::{threshold_for_expected_trials, ChainParams};
    use crate::qsim;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct World {
        chain: Chain,
        registry: OracleRegistry,
        config: ProtocolConfig,
        market: Marketplace,
        vault: Vault,
        rng: ChaCha8Rng,
        now: u64,
    }

    impl World {
        fn new(n: usize, m: usize, seed: u64) -> Self {
            let config = ProtocolConfig {
                n,
                m,
                seed,
                ..ProtocolConfig::default()
            };
            config.validate().unwrap();
            let params = ChainParams {
                initial_threshold: threshold_for_expected_trials(2),
                max_trials: 1 << 16,
                ..ChainParams::default()
            };
            Self {
                chain: Chain::new(params).unwrap(),
                registry: OracleRegistry::from_u64_seed(n, seed).unwrap(),
                config,
                market: Marketplace::new(),
                vault: Vault::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                now: 0,
            }
        }

        fn tick(&mut self) -> u64 {
            self.now += self.config.t_block;
            self.now
        }

        fn shard(&mut self) -> Serial {
            let now = self.tick();
            mint_shard(
                &mut self.chain,
                &self.registry,
                &self.config,
                &mut self.market,
                now,
                &mut self.rng,
            )
            .unwrap()
        }

        fn coin(&mut self) -> Result<CustodyToken, ProtocolError> {
            let now = self.tick();
            mint_bitcoin(
                &mut self.chain,
                &self.registry,
                &self.config,
                &mut self.market,
                &mut self.vault,
                "miner",
                now,
                &mut self.rng,
            )
        }

        fn verify(&mut self, token: &CustodyToken) -> VerifyReport {
            let coin = self.vault.coin(token).unwrap();
            verify_q(
                &self.chain,
                &self.registry,
                &self.config,
                coin,
                &mut self.rng,
            )
        }
    }

    #[test]
    fn config_defaults_and_threshold() {
        let cfg = ProtocolConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.k(), 10);
        assert_eq!(cfg.threshold(), 7);
        let noisy = ProtocolConfig {
            lambda: Some(0.2),
            epsilon: 0.1,
            ..cfg.clone()
        };
        assert_eq!(noisy.threshold(), 5);
        assert!(ProtocolConfig {
            t_max: 1799,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(ProtocolConfig {
            n: 7,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(ProtocolConfig {
            m: 1,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(ProtocolConfig {
            lambda: Some(0.0),
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(ProtocolConfig {
            epsilon: 0.95,
            lambda: Some(0.1),
            ..cfg
        }
        .validate()
        .is_err());
    }

    #[test]
    fn config_text_roundtrip() {
        let text = "# demo\nn = 6\nm=3 \nlambda = 0.25\nsupply_cap = 9\nseed = 42\n";
        let cfg = ProtocolConfig::parse(text).unwrap();
        assert_eq!((cfg.n, cfg.m, cfg.supply_cap, cfg.seed), (6, 3, 9, 42));
        assert_eq!(ProtocolConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert!(ProtocolConfig::parse("bogus = 1").is_err());
        assert!(ProtocolConfig::parse("n 4").is_err());
        assert!(ProtocolConfig::parse("m = x").is_err());
    }

    #[test]
    fn keygen_delegates() {
        let cfg = ProtocolConfig::default();
        let kp = keygen_q(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let sig = kp.private_key.sign(b"self-test").unwrap();
        assert!(sigs::verify_sig(&kp.public_key, b"self-test", &sig));
        let other = keygen_q(&cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(kp.public_key, other.public_key);
        let tiny = ProtocolConfig { n: 2, ..cfg };
        assert!(keygen_q(&tiny, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }

    #[test]
    fn naive_mint_and_verify() {
        let mut w = World::new(8, 3, 1);
        let before = w.chain.count_active(EntryTag::Shard);
        let mut coin = mint_naive(&mut w.chain, &w.registry, &w.config, 600, &mut w.rng).unwrap();
        assert_eq!(w.chain.count_active(EntryTag::Shard), before + 1);
        assert_eq!(
            verify_naive(&w.chain, &w.registry, &mut coin, &mut w.rng),
            Ok(())
        );
    }

    #[test]
    fn naive_rejection_stages() {
        let mut w = World::new(8, 3, 2);
        let mut coin = mint_naive(&mut w.chain, &w.registry, &w.config, 600, &mut w.rng).unwrap();
        let other = keygen_q(&w.config, &mut w.rng).unwrap();
        let honest_sig = std::mem::replace(
            &mut coin.signature,
            other.private_key.sign(&coin.serial.to_bytes()).unwrap(),
        );
        assert_eq!(
            verify_naive(&w.chain, &w.registry, &mut coin, &mut w.rng),
            Err(Stage::Signature)
        );
        coin.signature = honest_sig;

        let a = lab::registered_subspace(&w.registry, &coin.serial).unwrap();
        let outside = (0..256u32).find(|&y| !a.contains_index(y)).unwrap();
        coin.state = QuantumState::basis(8, outside).unwrap();
        for _ in 0..50 {
            let mut probe = QuantumShard {
                serial: coin.serial,
                state: QuantumState::basis(8, outside).unwrap(),
                signature: coin.signature.clone(),
                mint_time: 0,
            };
            assert_eq!(
                verify_naive(&w.chain, &w.registry, &mut probe, &mut w.rng),
                Err(Stage::Quantum)
            );
        }

        let unknown = Serial::new(24, 0).unwrap();
        let mut ghost = QuantumShard {
            serial: unknown,
            state: QuantumState::basis(8, 0).unwrap(),
            signature: coin.signature.clone(),
            mint_time: 0,
        };
        assert_eq!(
            verify_naive(&w.chain, &w.registry, &mut ghost, &mut w.rng),
            Err(Stage::Lookup)
        );
        ghost.state = QuantumState::basis(6, 0).unwrap();
        assert_eq!(
            verify_naive(&w.chain, &w.registry, &mut ghost, &mut w.rng),
            Err(Stage::Form)
        );
    }

    #[test]
    fn naive_mint_retries_on_ledger_duplicate() {
        let mut w = World::new(8, 3, 3);
        // predict the first serial with a cloned generator and occupy it
        let predicted = {
            let probe = OracleRegistry::from_u64_seed(8, 3).unwrap();
            prepare_shard(&probe, &w.config, &mut w.rng.clone())
                .unwrap()
                .serial()
        };
        let squat = LedgerEntry::new(EntryTag::Shard, predicted.to_bytes(), vec![0; 32]);
        w.chain
            .append(squat, 1, &mut ChaCha8Rng::seed_from_u64(99))
            .unwrap();
        let mut coin = mint_naive(&mut w.chain, &w.registry, &w.config, 600, &mut w.rng).unwrap();
        assert_ne!(coin.serial, predicted);
        assert_eq!(
            verify_naive(&w.chain, &w.registry, &mut coin, &mut w.rng),
            Ok(())
        );
    }

    #[test]
    fn shard_mint_publishes() {
        let mut w = World::new(8, 3, 4);
        let serial = w.shard();
        assert_eq!(w.market.len(), 1);
        let shard = &w.market.queue[0];
        let block_time = w.chain.tip().timestamp;
        assert_eq!(shard.mint_time, block_time);
        assert_eq!(
            w.chain
                .lookup(EntryTag::Shard, &serial.to_bytes())
                .unwrap()
                .timestamp,
            block_time
        );
        assert!(minischeme::verify_m(&w.registry, &shard.serial, &shard.state).accepted());
    }

    #[test]
    fn bitcoin_mint_and_verify() {
        let mut w = World::new(8, 3, 5);
        for _ in 0..3 {
            w.shard();
        }
        let token = w.coin().unwrap();
        assert!(w.market.is_empty());
        let report = w.verify(&token);
        assert!(report.accepted, "{report:?}");
        assert_eq!(report.passed, 3);
        assert!(report.shards.iter().all(|s| s.quantum_passed == Some(true)));
        // verification leaves ideal states unchanged, so it can repeat
        assert!(w.verify(&token).accepted);
    }

    #[test]
    fn stale_shard_is_skipped() {
        let mut w = World::new(8, 3, 6);
        w.shard();
        w.now += w.config.t_max;
        w.shard();
        w.shard();
        let err = w.coin().unwrap_err();
        assert!(matches!(
            err,
            ProtocolError::InsufficientFreshShards {
                fresh: 2,
                needed: 3
            }
        ));
        assert_eq!(w.market.len(), 2);
        w.shard();
        w.coin().unwrap();
    }

    #[test]
    fn reused_shard_conflicts() {
        let mut w = World::new(8, 3, 7);
        for _ in 0..3 {
            w.shard();
        }
        let token = w.coin().unwrap();
        let reused = {
            let coin = w.vault.coin(&token).unwrap();
            let s = &coin.shards[1];
            QuantumShard {
                serial: s.serial,
                state: lab::prepare_genuine_state(&w.registry, &s.serial).unwrap(),
                signature: s.signature.clone(),
                mint_time: s.mint_time,
            }
        };
        w.shard();
        w.market.publish(reused);
        w.shard();
        let err = w.coin().unwrap_err();
        assert!(matches!(err, ProtocolError::DescriptorConflict(_)));
        assert_eq!(w.market.len(), 2);
        w.shard();
        w.coin().unwrap();
    }

    #[test]
    fn threshold_boundary_exhaustive() {
        for m in 2..=7 {
            let mut w = World::new(4, m, 8 + m as u64);
            w.config.lambda = Some(0.3);
            w.config.validate().unwrap();
            for _ in 0..m {
                w.shard();
            }
            let token = w.coin().unwrap();
            let threshold = w.config.threshold();
            let serials: Vec<Serial> = w
                .vault
                .coin(&token)
                .unwrap()
                .shards
                .iter()
                .map(|s| s.serial)
                .collect();
            for pattern in 0u32..1 << m {
                let coin = w.vault.coin(&token).unwrap();
                for (i, serial) in serials.iter().enumerate() {
                    let a = lab::registered_subspace(&w.registry, serial).unwrap();
                    coin.shards[i].state = if pattern >> i & 1 == 1 {
                        qsim::build_subspace_state(&a).unwrap()
                    } else {
                        let y = (0..16u32).find(|&y| !a.contains_index(y)).unwrap();
                        QuantumState::basis(4, y).unwrap()
                    };
                }
                let report = w.verify(&token);
                assert_eq!(report.passed, pattern.count_ones() as usize);
                assert_eq!(
                    report.accepted,
                    report.passed >= threshold,
                    "m={m} pattern={pattern:b}"
                );
            }
        }
    }

    #[test]
    fn tampered_descriptor_signature_stops_before_measurement() {
        let mut w = World::new(8, 3, 20);
        for _ in 0..3 {
            w.shard();
        }
        let token = w.coin().unwrap();
        let coin = w.vault.coin(&token).unwrap();
        coin.descriptor_signature.bytes[5] ^= 1;
        // a state that any measurement would disturb
        let serial = coin.shards[0].serial;
        let a = lab::registered_subspace(&w.registry, &serial).unwrap();
        let y = (0..256u32).find(|&y| !a.contains_index(y)).unwrap();
        let genuine = qsim::build_subspace_state(&a).unwrap();
        let mixed: Vec<_> = genuine
            .amplitudes()
            .iter()
            .enumerate()
            .map(|(i, amp)| {
                if i as u32 == y {
                    num_complex::Complex64::new(0.6, 0.0)
                } else {
                    amp * 0.8
                }
            })
            .collect();
        let probe = QuantumState::from_amplitudes(8, mixed).unwrap();
        coin.shards[0].state = probe.clone();
        let before = w.registry.query_count();
        let report = w.verify(&token);
        assert_eq!(report.rejected_at, Some(Stage::DescriptorSignature));
        assert!(report.shards.iter().all(|s| s.quantum_passed.is_none()));
        assert_eq!(w.registry.query_count(), before);
        assert_eq!(w.vault.coin(&token).unwrap().shards[0].state, probe);
    }

    #[test]
    fn unknown_descriptor_fails_lookup() {
        let mut w = World::new(8, 3, 21);
        for _ in 0..3 {
            w.shard();
        }
        let token = w.coin().unwrap();
        let coin = w.vault.coin(&token).unwrap();
        coin.shards.swap(0, 1);
        assert_eq!(w.verify(&token).rejected_at, Some(Stage::DescriptorLookup));
        let coin = w.vault.coin(&token).unwrap();
        coin.shards.pop();
        assert_eq!(w.verify(&token).rejected_at, Some(Stage::Form));
    }

    #[test]
    fn transfer_consumes_token() {
        let mut w = World::new(8, 3, 22);
        for _ in 0..3 {
            w.shard();
        }
        let token = w.coin().unwrap();
        let height = w.chain.height();
        let saved = serde_json::to_string(&token).unwrap();
        let next = w.vault.transfer(token, "alice").unwrap();
        assert_eq!(next.owner(), "alice");
        assert_eq!(w.chain.height(), height);
        let snapshot = w.chain.clone();
        let coin = w.vault.coin(&next).unwrap();
        assert!(verify_q(&snapshot, &w.registry, &w.config, coin, &mut w.rng).accepted);

        let replayed: CustodyToken = serde_json::from_str(&saved).unwrap();
        assert!(matches!(
            w.vault.transfer(replayed, "mallory"),
            Err(ProtocolError::CustodyViolation)
        ));
        let replayed: CustodyToken = serde_json::from_str(&saved).unwrap();
        assert!(w.vault.coin(&replayed).is_err());
        assert!(w.vault.is_live(&next));
    }

    #[test]
    fn custody_random_sequences_keep_one_live_token() {
        let mut w = World::new(4, 2, 23);
        let mut tokens = Vec::new();
        for _ in 0..3 {
            w.shard();
            w.shard();
            tokens.push(w.coin().unwrap());
        }
        let mut issued: Vec<String> = tokens
            .iter()
            .map(|t| serde_json::to_string(t).unwrap())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for step in 0..500 {
            // try any token ever issued, live or stale
            let pick = rng.random_range(0..issued.len());
            let token: CustodyToken = serde_json::from_str(&issued[pick]).unwrap();
            let live = w.vault.is_live(&token);
            match w.vault.transfer(token, &format!("owner{step}")) {
                Ok(next) => {
                    assert!(live);
                    issued.push(serde_json::to_string(&next).unwrap());
                }
                Err(e) => {
                    assert!(!live);
                    assert!(matches!(e, ProtocolError::CustodyViolation));
                }
            }
            for id in 0..3u64 {
                let live_count = issued
                    .iter()
                    .map(|s| serde_json::from_str::<CustodyToken>(s).unwrap())
                    .filter(|t| t.coin_id == id && w.vault.is_live(t))
                    .count();
                assert_eq!(live_count, 1);
            }
        }
    }

    #[test]
    fn supply_cap_soak() {
        let mut w = World::new(6, 2, 25);
        w.config.supply_cap = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let mut capped = 0;
        for _ in 0..60 {
            if rng.random_bool(0.6) {
                if w.registry.registered_count() < 64 {
                    w.shard();
                }
            } else {
                match w.coin() {
                    Ok(_) | Err(ProtocolError::InsufficientFreshShards { .. }) => {}
                    Err(ProtocolError::SupplyCapReached(4)) => capped += 1,
                    Err(e) => panic!("{e}"),
                }
            }
            assert!(w.chain.count_active(EntryTag::Bitcoin) <= 4);
        }
        assert_eq!(w.chain.count_active(EntryTag::Bitcoin), 4);
        assert!(capped > 0);
        let zero = ProtocolConfig {
            supply_cap: 0,
            ..w.config.clone()
        };
        w.config = zero;
        assert!(matches!(w.coin(), Err(ProtocolError::SupplyCapReached(0))));
    }

    #[test]
    fn completeness_over_many_cycles() {
        for (n, m) in [(4, 3), (8, 3), (8, 7)] {
            let mut w = World::new(n, m, 30 + n as u64 + m as u64);
            let coins = if n == 4 { 5 } else { 30 };
            for _ in 0..coins {
                for _ in 0..m {
                    w.shard();
                }
                let token = w.coin().unwrap();
                assert!(w.verify(&token).accepted);
            }
        }
    }

    #[test]
    fn recorded_key_replays_identical_shard_state() {
        let registry = OracleRegistry::from_u64_seed(8, 40).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let (coin, key) = lab::mint_m_recording(&registry, &mut rng).unwrap();
        let (serial, subspace) = registry.generate_state(&key).unwrap();
        assert_eq!(serial, coin.serial);
        assert_eq!(qsim::build_subspace_state(&subspace).unwrap(), coin.state);
    }
}
