//! Seeded discrete-event simulation of mining, plus the Monte Carlo
//! harnesses for the reuse attack and the classic double-spend race.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use statrs::function::factorial::ln_binomial;
use thiserror::Error;

use crate::analytics::{self, ReuseBoundInput};
use crate::ledger::{
    threshold_for_expected_trials, Chain, ChainParams, Hash256, LedgerError, MiningJob,
};
use crate::minischeme::OracleRegistry;
use crate::protocol::{
    self, CustodyToken, Marketplace, PendingCoin, PendingShard, ProtocolConfig, ProtocolError,
    Vault,
};

const TRIAL_CHUNK: u64 = 1 << 12;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the JSON form of a configuration.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    sha256_hex(
        serde_json::to_string(config)
            .expect("plain struct")
            .as_bytes(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    BlockFound,
    ShardPublished,
    CoinMinted,
    AttackWindowStart,
    AttackSuccess,
    AttackFail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub tick: u64,
    pub seq: u64,
    pub kind: EventKind,
    pub actor: u32,
    pub payload: serde_json::Value,
}

#[derive(Debug, Default)]
struct EventLog {
    events: Vec<SimEvent>,
}

impl EventLog {
    fn push(&mut self, tick: u64, kind: EventKind, actor: u32, payload: serde_json::Value) {
        let seq = self.events.len() as u64;
        self.events.push(SimEvent {
            tick,
            seq,
            kind,
            actor,
            payload,
        });
    }
}

pub fn events_jsonl(events: &[SimEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("plain struct"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub protocol: ProtocolConfig,
    pub miners: usize,
    /// Ticks to simulate.
    pub duration: u64,
    /// Stop early once the active chain reaches this height.
    pub max_blocks: Option<u64>,
    /// Nonce trials per miner per tick.
    pub hashes_per_tick: u64,
    /// Expected ticks per block for a single miner at the initial difficulty.
    pub initial_block_ticks: u64,
    /// 0 disables retargeting.
    pub retarget_interval: u64,
    /// Ticks before other miners see a found block.
    pub propagation_delay: u64,
    /// Mine shards and combine them into coins; otherwise blocks are empty.
    pub mint: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        let protocol = ProtocolConfig::default();
        Self {
            initial_block_ticks: protocol.t_block,
            protocol,
            miners: 1,
            duration: 60_000,
            max_blocks: None,
            hashes_per_tick: 1,
            retarget_interval: 32,
            propagation_delay: 0,
            mint: true,
        }
    }
}

impl SimConfig {
    pub fn chain_params(&self) -> ChainParams {
        ChainParams {
            retarget_interval: self.retarget_interval,
            target_block_time: self.protocol.t_block,
            initial_threshold: threshold_for_expected_trials(
                self.initial_block_ticks * self.hashes_per_tick,
            ),
            max_trials: 1 << 40,
        }
    }
}

#[derive(Debug)]
enum Payload {
    Shard(PendingShard),
    Coin(PendingCoin),
}

struct Miner {
    view_tip: Hash256,
    payload: Option<Payload>,
}

pub struct HonestRun {
    pub chain: Chain,
    pub events: Vec<SimEvent>,
    pub vault: Vault,
    /// Custody of every coin minted, in mint order.
    pub tokens: Vec<CustodyToken>,
    pub market: Marketplace,
    pub registry: OracleRegistry,
}

impl HonestRun {
    pub fn events_jsonl(&self) -> String {
        events_jsonl(&self.events)
    }

    pub fn log_hash(&self) -> String {
        sha256_hex(self.events_jsonl().as_bytes())
    }

    /// Mean ticks between consecutive active blocks from `from_height` on.
    pub fn mean_block_interval(&self, from_height: u64) -> Option<f64> {
        let times: Vec<u64> = self
            .chain
            .active_blocks()
            .filter(|b| b.height >= from_height)
            .map(|b| b.timestamp)
            .collect();
        if times.len() < 2 {
            return None;
        }
        Some((times[times.len() - 1] - times[0]) as f64 / (times.len() - 1) as f64)
    }
}

fn hex_of(bytes: &[u8]) -> String {
    hex::encode(bytes)
}

/// Runs honest miners against one shared block tree. Every tick each miner
/// tries `hashes_per_tick` nonces on its view of the tip; found blocks
/// reach the other miners after `propagation_delay` ticks, and a miner
/// switches to a delivered block only if it is strictly higher.
///
/// Miner 0 also combines fresh shards into coins when enough are for sale.
pub fn run_honest_network(config: &SimConfig) -> Result<HonestRun, SimError> {
    if config.miners == 0 {
        return Err(SimError::Config("need at least one miner".into()));
    }
    if config.hashes_per_tick == 0 || config.initial_block_ticks == 0 {
        return Err(SimError::Config(
            "hashes_per_tick and initial_block_ticks must be positive".into(),
        ));
    }
    config.protocol.validate()?;
    let proto = &config.protocol;
    let mut rng = ChaCha8Rng::seed_from_u64(proto.seed);
    let registry = OracleRegistry::from_u64_seed(proto.n, proto.seed)
        .map_err(|e| SimError::Config(e.to_string()))?;
    let mut chain = Chain::new(config.chain_params())?;
    let mut log = EventLog::default();
    let mut market = Marketplace::new();
    let mut vault = Vault::new();
    let mut tokens = Vec::new();
    let genesis = chain.tip().pow_hash;
    let mut miners: Vec<Miner> = (0..config.miners)
        .map(|_| Miner {
            view_tip: genesis,
            payload: None,
        })
        .collect();
    // (arrival tick, receiving miner, block hash)
    let mut in_flight: Vec<(u64, usize, Hash256)> = Vec::new();

    for tick in 1..=config.duration {
        if config.max_blocks.is_some_and(|max| chain.height() >= max) {
            break;
        }
        let (due, later): (Vec<_>, Vec<_>) =
            in_flight.into_iter().partition(|(at, _, _)| *at <= tick);
        in_flight = later;
        for (_, who, hash) in due {
            adopt(&chain, &mut miners[who], hash);
        }

        for id in 0..miners.len() {
            if miners[id].payload.is_none() && config.mint {
                miners[id].payload =
                    choose_payload(id, &chain, &registry, proto, &mut market, tick, &mut rng);
            }
            let job = match job_for(&chain, &mut miners[id], &mut market, tick) {
                Some(job) => job,
                None => continue,
            };
            let start: u64 = rng.random();
            let Some(block) = job.try_nonces(start, config.hashes_per_tick) else {
                continue;
            };
            let hash = block.pow_hash;
            let height = block.height;
            chain.insert(block)?;
            log.push(
                tick,
                EventKind::BlockFound,
                id as u32,
                json!({ "height": height, "hash": hex_of(&hash) }),
            );
            miners[id].view_tip = hash;
            match miners[id].payload.take() {
                Some(Payload::Shard(p)) => {
                    let shard = p.finalize(tick);
                    log.push(
                        tick,
                        EventKind::ShardPublished,
                        id as u32,
                        json!({ "serial": shard.serial.to_hex() }),
                    );
                    market.publish(shard);
                }
                Some(Payload::Coin(c)) => {
                    let descriptor = hex_of(&c.entry().serial_key);
                    let token = c.finalize(&mut vault, &format!("miner{id}"));
                    log.push(
                        tick,
                        EventKind::CoinMinted,
                        id as u32,
                        json!({ "descriptor": descriptor, "coin": token.coin_id() }),
                    );
                    tokens.push(token);
                }
                None => {}
            }
            for (other, miner) in miners.iter_mut().enumerate() {
                if other == id {
                    continue;
                }
                if config.propagation_delay == 0 {
                    adopt(&chain, miner, hash);
                } else {
                    in_flight.push((tick + config.propagation_delay, other, hash));
                }
            }
        }
    }

    Ok(HonestRun {
        chain,
        events: log.events,
        vault,
        tokens,
        market,
        registry,
    })
}

fn adopt(chain: &Chain, miner: &mut Miner, hash: Hash256) {
    let (Some(new), Some(cur)) = (chain.block(&hash), chain.block(&miner.view_tip)) else {
        return;
    };
    if new.height > cur.height {
        miner.view_tip = hash;
    }
}

fn choose_payload<R: Rng + ?Sized>(
    id: usize,
    chain: &Chain,
    registry: &OracleRegistry,
    proto: &ProtocolConfig,
    market: &mut Marketplace,
    tick: u64,
    rng: &mut R,
) -> Option<Payload> {
    if id == 0 && market.fresh_count(chain, proto, tick) >= proto.m {
        if let Ok(coin) = protocol::prepare_coin(chain, registry, proto, market, tick, rng) {
            return Some(Payload::Coin(coin));
        }
    }
    if registry.registered_count() >= 1 << proto.n {
        return None;
    }
    protocol::prepare_shard(registry, proto, rng)
        .ok()
        .map(Payload::Shard)
}

/// Builds this tick's job; a payload that no longer fits the miner's
/// branch is dropped (coins return their shards to the market).
fn job_for(
    chain: &Chain,
    miner: &mut Miner,
    market: &mut Marketplace,
    tick: u64,
) -> Option<MiningJob> {
    let entry = miner.payload.as_ref().map(|p| match p {
        Payload::Shard(s) => s.entry(),
        Payload::Coin(c) => c.entry(),
    });
    match chain.mining_job_on(&miner.view_tip, entry, tick) {
        Ok(job) => Some(job),
        Err(_) => {
            if let Some(Payload::Coin(c)) = miner.payload.take() {
                c.abandon(market);
            }
            chain.mining_job_on(&miner.view_tip, None, tick).ok()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Block slots per window.
    pub k: u64,
    /// Shards per coin.
    pub m: u64,
    /// Attacker share of the hash power.
    pub p: f64,
    pub trials: u64,
    pub seed: u64,
    /// Shard wins needed in the first window; defaults to m − 2.
    pub shard_wins_needed: Option<u64>,
}

impl AttackConfig {
    pub fn from_protocol(config: &ProtocolConfig, p: f64, trials: u64) -> Self {
        Self {
            k: config.k(),
            m: config.m as u64,
            p,
            trials,
            seed: config.seed,
            shard_wins_needed: None,
        }
    }

    pub fn wins_needed(&self) -> u64 {
        self.shard_wins_needed.unwrap_or(self.m.saturating_sub(2))
    }

    fn validate(&self) -> Result<(), SimError> {
        if self.k < 3 {
            return Err(SimError::Config(format!(
                "k must be at least 3, got {}",
                self.k
            )));
        }
        if !(0.0..1.0).contains(&self.p) {
            return Err(SimError::Config(format!(
                "p must lie in [0, 1), got {}",
                self.p
            )));
        }
        if self.wins_needed() > self.k {
            return Err(SimError::Config(
                "more shard wins needed than slots in the window".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackReport {
    pub k: u64,
    pub m: u64,
    pub gamma: f64,
    pub p: f64,
    pub trials: u64,
    /// Trials with at least the needed shard wins and at least one
    /// combining win: the attack succeeds.
    pub successes: u64,
    pub measured_rate: f64,
    /// Trials with exactly the needed shard wins and exactly one combining
    /// win, the event the closed form counts.
    pub exact_pattern_successes: u64,
    pub exact_pattern_rate: f64,
    /// Closed-form probability of the exact pattern.
    pub analytic_eta: f64,
    /// P(≥ needed wins in k) · (1 − (1 − p)^k).
    pub tail_model: f64,
    /// `None` when γ is outside the bound's range.
    pub bound: Option<f64>,
    pub p_limit: Option<f64>,
    pub admissible: bool,
    /// Largest number of slots any trial drew in one window.
    pub max_slots_per_window: u64,
    pub seed: u64,
    pub config_hash: String,
}

pub const ATTACK_CSV_HEADER: &str =
    "k,m,gamma,p,trials,successes,measured_rate,exact_pattern_rate,analytic_eta,tail_model,bound,admissible,seed,config_hash";

impl AttackReport {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:e},{:e},{:e},{:e},{},{},{},{}",
            self.k,
            self.m,
            self.gamma,
            self.p,
            self.trials,
            self.successes,
            self.measured_rate,
            self.exact_pattern_rate,
            self.analytic_eta,
            self.tail_model,
            self.bound.map(|b| format!("{b:e}")).unwrap_or_default(),
            self.admissible,
            self.seed,
            self.config_hash
        )
    }

    /// Binomial standard error of a rate `q` over this report's trials.
    pub fn sigma(&self, q: f64) -> f64 {
        (q * (1.0 - q) / self.trials as f64).sqrt()
    }
}

/// Probability of at least `wins` successes in `slots` Bernoulli(p) draws.
pub fn binomial_tail(slots: u64, wins: u64, p: f64) -> f64 {
    if wins == 0 {
        return 1.0;
    }
    if p == 0.0 {
        return 0.0;
    }
    (wins..=slots)
        .map(|j| {
            (ln_binomial(slots, j) + j as f64 * p.ln() + (slots - j) as f64 * (1.0 - p).ln()).exp()
        })
        .sum::<f64>()
        .min(1.0)
}

fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

fn window<R: Rng + ?Sized>(rng: &mut R, k: u64, p: f64) -> u64 {
    (0..k).filter(|_| rng.random_bool(p)).count() as u64
}

/// Two windows of `k` slots; honest wins never cancel the attacker's.
fn attack_trial(cfg: &AttackConfig, trial: u64) -> (u64, u64) {
    let mut rng = trial_rng(cfg.seed, trial);
    let shards = window(&mut rng, cfg.k, cfg.p);
    let combine = window(&mut rng, cfg.k, cfg.p);
    (shards, combine)
}

/// Monte Carlo of the two-window reuse attack. Trial `i` draws from its
/// own stream of the seed, so results do not depend on thread count.
pub fn run_reuse_attack_trials(cfg: &AttackConfig) -> Result<AttackReport, SimError> {
    cfg.validate()?;
    let need = cfg.wins_needed();
    let chunks = cfg.trials.div_ceil(TRIAL_CHUNK);
    let (successes, exact) = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let (mut s, mut e) = (0u64, 0u64);
            for trial in c * TRIAL_CHUNK..((c + 1) * TRIAL_CHUNK).min(cfg.trials) {
                let (shards, combine) = attack_trial(cfg, trial);
                s += u64::from(shards >= need && combine >= 1);
                e += u64::from(shards == need && combine == 1);
            }
            (s, e)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));

    let input = ReuseBoundInput::new(cfg.k, need + 2, cfg.p);
    let analytic_eta = analytics::eta_exact(&input)
        .map_err(|e| SimError::Config(e.to_string()))?
        .eta;
    let bound = analytics::eta_bound(&input).ok();
    let trials = cfg.trials.max(1) as f64;
    Ok(AttackReport {
        k: cfg.k,
        m: cfg.m,
        gamma: input.gamma(),
        p: cfg.p,
        trials: cfg.trials,
        successes,
        measured_rate: successes as f64 / trials,
        exact_pattern_successes: exact,
        exact_pattern_rate: exact as f64 / trials,
        analytic_eta,
        tail_model: binomial_tail(cfg.k, need, cfg.p) * (1.0 - (1.0 - cfg.p).powi(cfg.k as i32)),
        bound: bound.map(|b| b.bound),
        p_limit: bound.map(|b| b.p_limit),
        admissible: bound.is_some_and(|b| b.admissible),
        max_slots_per_window: cfg.k,
        seed: cfg.seed,
        config_hash: config_hash(cfg),
    })
}

/// Event trace of the first `count` attack trials, matching the trials
/// counted by [`run_reuse_attack_trials`].
pub fn trace_attack_trials(cfg: &AttackConfig, count: u64) -> Result<Vec<SimEvent>, SimError> {
    cfg.validate()?;
    let need = cfg.wins_needed();
    let mut log = EventLog::default();
    for trial in 0..count.min(cfg.trials) {
        let (shards, combine) = attack_trial(cfg, trial);
        let base = trial * 2 * cfg.k;
        log.push(
            base,
            EventKind::AttackWindowStart,
            1,
            json!({ "trial": trial, "window": 1 }),
        );
        log.push(
            base + cfg.k,
            EventKind::AttackWindowStart,
            1,
            json!({ "trial": trial, "window": 2 }),
        );
        let kind = if shards >= need && combine >= 1 {
            EventKind::AttackSuccess
        } else {
            EventKind::AttackFail
        };
        log.push(
            base + 2 * cfg.k,
            kind,
            1,
            json!({ "trial": trial, "shard_wins": shards, "combine_wins": combine }),
        );
    }
    Ok(log.events)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DoubleSpendReport {
    pub p: f64,
    pub confirmations: u64,
    pub trials: u64,
    pub successes: u64,
    pub rate: f64,
    /// A race is lost once the attacker trails by this many blocks.
    pub max_deficit: u64,
    pub seed: u64,
}

pub const DOUBLE_SPEND_MAX_DEFICIT: u64 = 200;

/// The attacker mines a private chain from the moment the payment is
/// broadcast and wins if, once the merchant has seen `confirmations`
/// honest blocks, the private chain ever becomes strictly longer.
pub fn run_double_spend_baseline(
    p: f64,
    confirmations: u64,
    trials: u64,
    seed: u64,
) -> Result<DoubleSpendReport, SimError> {
    if confirmations == 0 {
        return Err(SimError::Config("confirmations must be at least 1".into()));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(SimError::Config(format!("p must lie in [0, 1), got {p}")));
    }
    let chunks = trials.div_ceil(TRIAL_CHUNK);
    let successes: u64 = (0..chunks)
        .into_par_iter()
        .map(|c| {
            (c * TRIAL_CHUNK..((c + 1) * TRIAL_CHUNK).min(trials))
                .filter(|&t| race(&mut trial_rng(seed, t), p, confirmations))
                .count() as u64
        })
        .sum();
    Ok(DoubleSpendReport {
        p,
        confirmations,
        trials,
        successes,
        rate: successes as f64 / trials.max(1) as f64,
        max_deficit: DOUBLE_SPEND_MAX_DEFICIT,
        seed,
    })
}

fn race<R: Rng + ?Sized>(rng: &mut R, p: f64, confirmations: u64) -> bool {
    let (mut honest, mut attacker) = (0u64, 0u64);
    loop {
        if rng.random_bool(p) {
            attacker += 1;
        } else {
            honest += 1;
        }
        if honest >= confirmations {
            if attacker > honest {
                return true;
            }
            if honest - attacker >= DOUBLE_SPEND_MAX_DEFICIT {
                return false;
            }
        }
    }
}
