//! Proof-of-work ledger holding both logical ledgers in one chain.
//!
//! Entries are tagged [`EntryTag::Shard`] (serial → minting key) or
//! [`EntryTag::Bitcoin`] (descriptor → minting key). Blocks form a tree;
//! the active chain is the longest branch, ties going to the branch seen
//! first. Lookups only see the active chain.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use num_bigint::BigUint;
use num_traits::One;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type Hash256 = [u8; 32];

pub const HASH_NAME: &str = "sha256";
const LOG_MAGIC: &[u8; 8] = b"QBTCLOG\x01";
const MAX_ENTRIES_PER_BLOCK: usize = 1;
const TRIAL_BATCH: u64 = 1024;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("{tag:?} key {key} already exists on the active chain")]
    DuplicateSerial { tag: EntryTag, key: String },
    #[error("shard {0} is already part of a combined coin")]
    DescriptorConflict(String),
    #[error("no block found after {0} nonce trials")]
    MiningStalled(u64),
    #[error("not found")]
    NotFound,
    #[error("invalid block: {0}")]
    InvalidBlock(String),
    #[error("malformed descriptor: {0}")]
    Descriptor(String),
    #[error("malformed chain file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryTag {
    Shard,
    Bitcoin,
}

impl EntryTag {
    fn code(self) -> u8 {
        match self {
            EntryTag::Shard => 0,
            EntryTag::Bitcoin => 1,
        }
    }

    fn from_code(c: u8) -> Result<Self, LedgerError> {
        match c {
            0 => Ok(EntryTag::Shard),
            1 => Ok(EntryTag::Bitcoin),
            other => Err(LedgerError::Format(format!("unknown entry tag {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub tag: EntryTag,
    pub serial_key: Vec<u8>,
    pub public_key: Vec<u8>,
    /// Set to the block timestamp when sealed.
    pub timestamp: u64,
}

impl LedgerEntry {
    pub fn new(tag: EntryTag, serial_key: Vec<u8>, public_key: Vec<u8>) -> Self {
        Self {
            tag,
            serial_key,
            public_key,
            timestamp: 0,
        }
    }

    fn encode(&self, out: &mut Vec<u8>) {
        out.push(self.tag.code());
        put_str(out, &hex::encode(&self.serial_key));
        put_str(out, &hex::encode(&self.public_key));
        out.extend_from_slice(&self.timestamp.to_be_bytes());
    }

    fn decode(cur: &mut Cursor<'_>) -> Result<Self, LedgerError> {
        let tag = EntryTag::from_code(cur.u8()?)?;
        let serial_key = cur.hex_str()?;
        let public_key = cur.hex_str()?;
        let timestamp = cur.u64()?;
        Ok(Self {
            tag,
            serial_key,
            public_key,
            timestamp,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_be_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], LedgerError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| LedgerError::Format("truncated record".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, LedgerError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, LedgerError> {
        Ok(u32::from_be_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, LedgerError> {
        Ok(u64::from_be_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn hash(&mut self) -> Result<Hash256, LedgerError> {
        Ok(self.take(32)?.try_into().expect("32 bytes"))
    }

    fn hex_str(&mut self) -> Result<Vec<u8>, LedgerError> {
        let len = self.u32()? as usize;
        hex::decode(self.take(len)?).map_err(|e| LedgerError::Format(e.to_string()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

/// Length-prefixed concatenation of shard serials, in shard order.
pub fn encode_descriptor(serials: &[Vec<u8>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(serials.len() as u16).to_be_bytes());
    for s in serials {
        out.extend_from_slice(&(s.len() as u16).to_be_bytes());
        out.extend_from_slice(s);
    }
    out
}

pub fn decode_descriptor(bytes: &[u8]) -> Result<Vec<Vec<u8>>, LedgerError> {
    let bad = |msg: &str| LedgerError::Descriptor(msg.to_string());
    if bytes.len() < 2 {
        return Err(bad("missing count"));
    }
    let count = u16::from_be_bytes([bytes[0], bytes[1]]) as usize;
    let mut pos = 2;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len_bytes = bytes
            .get(pos..pos + 2)
            .ok_or_else(|| bad("truncated length"))?;
        let len = u16::from_be_bytes([len_bytes[0], len_bytes[1]]) as usize;
        pos += 2;
        out.push(
            bytes
                .get(pos..pos + len)
                .ok_or_else(|| bad("truncated serial"))?
                .to_vec(),
        );
        pos += len;
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub height: u64,
    pub prev_hash: Hash256,
    pub nonce: u64,
    pub timestamp: u64,
    /// Big-endian 256-bit target the hash had to beat.
    pub threshold: Hash256,
    pub entries: Vec<LedgerEntry>,
    pub pow_hash: Hash256,
}

fn header_prefix(prev_hash: &Hash256, entries: &[LedgerEntry], timestamp: u64) -> Sha256 {
    let mut h = Sha256::new();
    h.update(prev_hash);
    let mut buf = Vec::new();
    buf.extend_from_slice(&(entries.len() as u32).to_be_bytes());
    for e in entries {
        e.encode(&mut buf);
    }
    h.update(&buf);
    h.update(timestamp.to_be_bytes());
    h
}

impl Block {
    /// SHA-256 of prev_hash ‖ entries ‖ timestamp ‖ nonce.
    pub fn compute_hash(&self) -> Hash256 {
        let mut h = header_prefix(&self.prev_hash, &self.entries, self.timestamp);
        h.update(self.nonce.to_be_bytes());
        h.finalize().into()
    }

    pub fn meets_threshold(&self) -> bool {
        self.pow_hash < self.threshold
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(&self.prev_hash);
        out.extend_from_slice(&self.nonce.to_be_bytes());
        out.extend_from_slice(&self.timestamp.to_be_bytes());
        out.extend_from_slice(&self.threshold);
        out.extend_from_slice(&(self.entries.len() as u32).to_be_bytes());
        for e in &self.entries {
            e.encode(&mut out);
        }
        out.extend_from_slice(&self.pow_hash);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LedgerError> {
        let mut cur = Cursor::new(bytes);
        let height = cur.u64()?;
        let prev_hash = cur.hash()?;
        let nonce = cur.u64()?;
        let timestamp = cur.u64()?;
        let threshold = cur.hash()?;
        let count = cur.u32()? as usize;
        let entries = (0..count)
            .map(|_| LedgerEntry::decode(&mut cur))
            .collect::<Result<Vec<_>, _>>()?;
        let pow_hash = cur.hash()?;
        if !cur.done() {
            return Err(LedgerError::Format("trailing bytes in block record".into()));
        }
        Ok(Self {
            height,
            prev_hash,
            nonce,
            timestamp,
            threshold,
            entries,
            pow_hash,
        })
    }
}

pub fn threshold_to_biguint(t: &Hash256) -> BigUint {
    BigUint::from_bytes_be(t)
}

/// Big-endian 32 bytes, saturating at 2^256 − 1.
pub fn biguint_to_threshold(v: &BigUint) -> Hash256 {
    let bytes = v.to_bytes_be();
    if bytes.len() > 32 {
        return [0xff; 32];
    }
    let mut out = [0u8; 32];
    out[32 - bytes.len()..].copy_from_slice(&bytes);
    out
}

pub fn max_threshold() -> BigUint {
    (BigUint::one() << 256u32) - BigUint::one()
}

/// Threshold with success probability `1/expected_trials` per trial.
pub fn threshold_for_expected_trials(expected_trials: u64) -> Hash256 {
    biguint_to_threshold(&((BigUint::one() << 256u32) / BigUint::from(expected_trials.max(1))))
}

/// Difficulty retarget: the threshold scales by observed/target block time,
/// with the factor clamped to [1/4, 4].
pub fn retarget(old: &BigUint, observed_span: u64, blocks: u64, target_block_time: u64) -> BigUint {
    let scaled = old * BigUint::from(observed_span)
        / (BigUint::from(blocks) * BigUint::from(target_block_time));
    let upper = old * 4u32;
    let lower = old / 4u32;
    let clamped = if scaled > upper {
        upper
    } else if scaled < lower {
        lower
    } else {
        scaled
    };
    clamped.clamp(BigUint::one(), max_threshold())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainParams {
    pub retarget_interval: u64,
    pub target_block_time: u64,
    pub initial_threshold: Hash256,
    /// Nonce trials before mining gives up.
    pub max_trials: u64,
}

impl Default for ChainParams {
    fn default() -> Self {
        Self {
            retarget_interval: 32,
            target_block_time: 600,
            initial_threshold: threshold_for_expected_trials(16),
            max_trials: 1 << 32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    /// The block extended the active tip.
    Extended,
    /// The block made a side branch the longest; `depth` blocks were rolled back.
    Reorg { depth: u64 },
    /// The block landed on a branch that is not (yet) the longest.
    SideBranch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookupResult {
    pub public_key: Vec<u8>,
    pub timestamp: u64,
    pub height: u64,
}

/// Precomputed header state for nonce trials.
pub struct MiningJob {
    height: u64,
    prev_hash: Hash256,
    timestamp: u64,
    threshold: Hash256,
    entries: Vec<LedgerEntry>,
    prefix: Sha256,
}

impl MiningJob {
    pub fn parent_hash(&self) -> Hash256 {
        self.prev_hash
    }

    /// Tries `count` nonces starting at `start`; returns the sealed block
    /// on the first success.
    pub fn try_nonces(&self, start: u64, count: u64) -> Option<Block> {
        for i in 0..count {
            let nonce = start.wrapping_add(i);
            let mut h = self.prefix.clone();
            h.update(nonce.to_be_bytes());
            let hash: Hash256 = h.finalize().into();
            if hash < self.threshold {
                return Some(Block {
                    height: self.height,
                    prev_hash: self.prev_hash,
                    nonce,
                    timestamp: self.timestamp,
                    threshold: self.threshold,
                    entries: self.entries.clone(),
                    pow_hash: hash,
                });
            }
        }
        None
    }
}

/// Append-only block tree with a longest-chain view.
#[derive(Debug, Clone)]
pub struct Chain {
    params: ChainParams,
    blocks: Vec<Block>,
    parent: Vec<Option<usize>>,
    by_hash: HashMap<Hash256, usize>,
    active: Vec<usize>,
    entry_index: HashMap<(EntryTag, Vec<u8>), usize>,
    combined: HashMap<Vec<u8>, usize>,
}

impl Chain {
    /// Creates a chain and mines its genesis block at tick 0.
    pub fn new(params: ChainParams) -> Result<Self, LedgerError> {
        let mut chain = Self {
            params,
            blocks: Vec::new(),
            parent: Vec::new(),
            by_hash: HashMap::new(),
            active: Vec::new(),
            entry_index: HashMap::new(),
            combined: HashMap::new(),
        };
        let job = MiningJob {
            height: 0,
            prev_hash: [0; 32],
            timestamp: 0,
            threshold: chain.params.initial_threshold,
            entries: Vec::new(),
            prefix: header_prefix(&[0; 32], &[], 0),
        };
        let genesis = job
            .try_nonces(0, chain.params.max_trials)
            .ok_or(LedgerError::MiningStalled(chain.params.max_trials))?;
        chain.link(genesis, None);
        chain.active.push(0);
        Ok(chain)
    }

    pub fn params(&self) -> &ChainParams {
        &self.params
    }

    pub fn hash_name(&self) -> &'static str {
        HASH_NAME
    }

    pub fn tip(&self) -> &Block {
        &self.blocks[*self.active.last().expect("genesis")]
    }

    pub fn height(&self) -> u64 {
        self.tip().height
    }

    /// Blocks of the active chain, genesis first.
    pub fn active_blocks(&self) -> impl Iterator<Item = &Block> {
        self.active.iter().map(|&i| &self.blocks[i])
    }

    /// Every block ever linked, in insertion order.
    pub fn all_blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block(&self, hash: &Hash256) -> Option<&Block> {
        self.by_hash.get(hash).map(|&i| &self.blocks[i])
    }

    pub fn count_active(&self, tag: EntryTag) -> usize {
        self.entry_index.keys().filter(|(t, _)| *t == tag).count()
    }

    fn link(&mut self, block: Block, parent: Option<usize>) -> usize {
        let idx = self.blocks.len();
        self.by_hash.insert(block.pow_hash, idx);
        self.blocks.push(block);
        self.parent.push(parent);
        idx
    }

    fn on_active(&self, idx: usize) -> bool {
        let h = self.blocks[idx].height as usize;
        self.active.get(h) == Some(&idx)
    }

    fn ancestor_at(&self, mut idx: usize, height: u64) -> usize {
        while self.blocks[idx].height > height {
            if self.on_active(idx) {
                return self.active[height as usize];
            }
            idx = self.parent[idx].expect("non-genesis has a parent");
        }
        idx
    }

    /// Threshold a child of `parent` must meet.
    fn expected_threshold(&self, parent: usize) -> Hash256 {
        let p = &self.blocks[parent];
        let height = p.height + 1;
        let interval = self.params.retarget_interval;
        if interval == 0 || !height.is_multiple_of(interval) || height < interval + 1 {
            return p.threshold;
        }
        let first = self.ancestor_at(parent, height - 1 - interval);
        let span = p.timestamp.saturating_sub(self.blocks[first].timestamp);
        let next = retarget(
            &threshold_to_biguint(&p.threshold),
            span,
            interval,
            self.params.target_block_time,
        );
        biguint_to_threshold(&next)
    }

    /// Threshold for the next block on the active tip.
    pub fn next_threshold(&self) -> Hash256 {
        self.expected_threshold(*self.active.last().expect("genesis"))
    }

    fn shards_of(entry: &LedgerEntry) -> Result<Vec<Vec<u8>>, LedgerError> {
        decode_descriptor(&entry.serial_key)
    }

    /// Checks `entry` against the branch ending at `parent`.
    fn check_entry(&self, parent: usize, entry: &LedgerEntry) -> Result<(), LedgerError> {
        let shards = match entry.tag {
            EntryTag::Bitcoin => Self::shards_of(entry)?,
            EntryTag::Shard => Vec::new(),
        };
        // entries on the side branch between the fork point and `parent`
        let mut branch_keys = HashSet::new();
        let mut branch_combined = HashSet::new();
        let mut idx = parent;
        while !self.on_active(idx) {
            for e in &self.blocks[idx].entries {
                branch_keys.insert((e.tag, e.serial_key.clone()));
                if e.tag == EntryTag::Bitcoin {
                    branch_combined.extend(Self::shards_of(e)?);
                }
            }
            idx = self.parent[idx].expect("genesis is active");
        }
        let fork_height = self.blocks[idx].height;
        let visible =
            |found: Option<&usize>| found.is_some_and(|&b| self.blocks[b].height <= fork_height);

        let key = (entry.tag, entry.serial_key.clone());
        if branch_keys.contains(&key) || visible(self.entry_index.get(&key)) {
            return Err(LedgerError::DuplicateSerial {
                tag: entry.tag,
                key: hex::encode(&entry.serial_key),
            });
        }
        for s in &shards {
            if branch_combined.contains(s) || visible(self.combined.get(s)) {
                return Err(LedgerError::DescriptorConflict(hex::encode(s)));
            }
        }
        if shards.iter().collect::<HashSet<_>>().len() != shards.len() {
            return Err(LedgerError::Descriptor("descriptor repeats a shard".into()));
        }
        Ok(())
    }

    /// Checks an entry against the active chain without mining.
    pub fn check_append(&self, entry: &LedgerEntry) -> Result<(), LedgerError> {
        self.check_entry(*self.active.last().expect("genesis"), entry)
    }

    /// Prepares a mining job on the active tip.
    pub fn mining_job(
        &self,
        entry: Option<LedgerEntry>,
        timestamp: u64,
    ) -> Result<MiningJob, LedgerError> {
        self.mining_job_on(&self.tip().pow_hash.clone(), entry, timestamp)
    }

    /// Prepares a mining job on an arbitrary known block.
    pub fn mining_job_on(
        &self,
        parent_hash: &Hash256,
        entry: Option<LedgerEntry>,
        timestamp: u64,
    ) -> Result<MiningJob, LedgerError> {
        let parent = *self
            .by_hash
            .get(parent_hash)
            .ok_or_else(|| LedgerError::InvalidBlock("unknown parent".into()))?;
        let mut entries: Vec<LedgerEntry> = entry.into_iter().collect();
        for e in &mut entries {
            e.timestamp = timestamp;
            self.check_entry(parent, e)?;
        }
        let p = &self.blocks[parent];
        Ok(MiningJob {
            height: p.height + 1,
            prev_hash: p.pow_hash,
            timestamp,
            threshold: self.expected_threshold(parent),
            prefix: header_prefix(&p.pow_hash, &entries, timestamp),
            entries,
        })
    }

    /// Appends `entry` in a new block on the active tip, running nonce
    /// trials until the hash beats the threshold.
    pub fn append<R: Rng + ?Sized>(
        &mut self,
        entry: LedgerEntry,
        timestamp: u64,
        rng: &mut R,
    ) -> Result<&Block, LedgerError> {
        self.append_with_interrupt(entry, timestamp, rng, &mut |_| {})
    }

    /// Like [`Chain::append`], but calls `between_batches` after every batch
    /// of nonce trials. If the hook moves the active tip (a competing block
    /// arrived), mining restarts on the new tip.
    pub fn append_with_interrupt<R: Rng + ?Sized>(
        &mut self,
        entry: LedgerEntry,
        timestamp: u64,
        rng: &mut R,
        between_batches: &mut dyn FnMut(&mut Chain),
    ) -> Result<&Block, LedgerError> {
        let mut job = self.mining_job(Some(entry.clone()), timestamp)?;
        let mut nonce: u64 = rng.random();
        let mut trials = 0u64;
        while trials < self.params.max_trials {
            let batch = TRIAL_BATCH.min(self.params.max_trials - trials);
            if let Some(block) = job.try_nonces(nonce, batch) {
                let hash = block.pow_hash;
                self.insert(block)?;
                return Ok(self.block(&hash).expect("just inserted"));
            }
            nonce = nonce.wrapping_add(batch);
            trials += batch;
            between_batches(self);
            if self.tip().pow_hash != job.prev_hash {
                job = self.mining_job(Some(entry.clone()), timestamp)?;
            }
        }
        Err(LedgerError::MiningStalled(trials))
    }

    /// Validates and links a sealed block, switching the active chain if
    /// the block's branch becomes strictly longest.
    pub fn insert(&mut self, block: Block) -> Result<InsertOutcome, LedgerError> {
        let invalid = |m: String| Err(LedgerError::InvalidBlock(m));
        if self.by_hash.contains_key(&block.pow_hash) {
            return invalid("duplicate block".into());
        }
        let Some(&parent) = self.by_hash.get(&block.prev_hash) else {
            return invalid("unknown parent".into());
        };
        let p = &self.blocks[parent];
        if block.height != p.height + 1 {
            return invalid(format!(
                "height {} does not follow {}",
                block.height, p.height
            ));
        }
        if block.timestamp < p.timestamp {
            return invalid("timestamp precedes parent".into());
        }
        if block.threshold != self.expected_threshold(parent) {
            return invalid("threshold does not follow the retarget schedule".into());
        }
        if block.compute_hash() != block.pow_hash {
            return invalid("hash does not match contents".into());
        }
        if !block.meets_threshold() {
            return invalid("hash is not below the threshold".into());
        }
        if block.entries.len() > MAX_ENTRIES_PER_BLOCK {
            return invalid("too many entries".into());
        }
        for e in &block.entries {
            if e.timestamp != block.timestamp {
                return invalid("entry timestamp differs from block".into());
            }
            self.check_entry(parent, e)?;
        }

        let height = block.height;
        let extends_tip = parent == *self.active.last().expect("genesis");
        let idx = self.link(block, Some(parent));
        if extends_tip {
            self.active.push(idx);
            self.index_block(idx)?;
            Ok(InsertOutcome::Extended)
        } else if height > self.height() {
            let old_tip = *self.active.last().expect("genesis");
            let old_tip_height = self.height();
            self.switch_to(idx)?;
            let mut common = old_tip;
            while !self.on_active(common) {
                common = self.parent[common].expect("genesis is shared");
            }
            Ok(InsertOutcome::Reorg {
                depth: old_tip_height - self.blocks[common].height,
            })
        } else {
            Ok(InsertOutcome::SideBranch)
        }
    }

    fn index_block(&mut self, idx: usize) -> Result<(), LedgerError> {
        let entries = self.blocks[idx].entries.clone();
        for e in entries {
            if e.tag == EntryTag::Bitcoin {
                for s in Self::shards_of(&e)? {
                    self.combined.insert(s, idx);
                }
            }
            self.entry_index.insert((e.tag, e.serial_key), idx);
        }
        Ok(())
    }

    fn switch_to(&mut self, tip: usize) -> Result<(), LedgerError> {
        let mut path = Vec::new();
        let mut idx = Some(tip);
        while let Some(i) = idx {
            path.push(i);
            idx = self.parent[i];
        }
        path.reverse();
        self.active = path;
        self.entry_index.clear();
        self.combined.clear();
        for i in self.active.clone() {
            self.index_block(i)?;
        }
        Ok(())
    }

    /// Public key and timestamp of an entry on the active chain.
    pub fn lookup(&self, tag: EntryTag, serial_key: &[u8]) -> Result<LookupResult, LedgerError> {
        let idx = self
            .entry_index
            .get(&(tag, serial_key.to_vec()))
            .ok_or(LedgerError::NotFound)?;
        let block = &self.blocks[*idx];
        let entry = block
            .entries
            .iter()
            .find(|e| e.tag == tag && e.serial_key == serial_key)
            .expect("index points at the entry's block");
        Ok(LookupResult {
            public_key: entry.public_key.clone(),
            timestamp: block.timestamp,
            height: block.height,
        })
    }

    /// Whether a shard serial has been combined into an active coin.
    pub fn is_combined(&self, shard_serial: &[u8]) -> bool {
        self.combined.contains_key(shard_serial)
    }

    /// tip height − block height + 1 for active blocks, 0 otherwise.
    pub fn confirmations(&self, hash: &Hash256) -> u64 {
        match self.by_hash.get(hash) {
            Some(&idx) if self.on_active(idx) => self.height() - self.blocks[idx].height + 1,
            _ => 0,
        }
    }

    /// Recomputes every hash and link. Returns the number of blocks checked.
    pub fn audit(&self) -> Result<usize, LedgerError> {
        for (idx, block) in self.blocks.iter().enumerate() {
            if block.compute_hash() != block.pow_hash {
                return Err(LedgerError::InvalidBlock(format!(
                    "block {idx}: hash mismatch"
                )));
            }
            if !block.meets_threshold() {
                return Err(LedgerError::InvalidBlock(format!(
                    "block {idx}: above threshold"
                )));
            }
            match self.parent[idx] {
                None => {
                    if block.prev_hash != [0; 32] || block.height != 0 {
                        return Err(LedgerError::InvalidBlock("bad genesis".into()));
                    }
                }
                Some(p) => {
                    let parent = &self.blocks[p];
                    if block.prev_hash != parent.pow_hash || block.height != parent.height + 1 {
                        return Err(LedgerError::InvalidBlock(format!(
                            "block {idx}: broken link"
                        )));
                    }
                    if block.threshold != self.expected_threshold(p) {
                        return Err(LedgerError::InvalidBlock(format!("block {idx}: threshold")));
                    }
                }
            }
        }
        Ok(self.blocks.len())
    }

    /// Binary log: header, then every block in insertion order as a
    /// length-prefixed record.
    pub fn write_log<W: Write>(&self, mut w: W) -> Result<(), LedgerError> {
        let mut header = Vec::new();
        header.extend_from_slice(LOG_MAGIC);
        put_str(&mut header, HASH_NAME);
        header.extend_from_slice(&self.params.retarget_interval.to_be_bytes());
        header.extend_from_slice(&self.params.target_block_time.to_be_bytes());
        header.extend_from_slice(&self.params.initial_threshold);
        header.extend_from_slice(&self.params.max_trials.to_be_bytes());
        w.write_all(&header)?;
        for block in &self.blocks {
            let rec = block.to_bytes();
            w.write_all(&(rec.len() as u32).to_be_bytes())?;
            w.write_all(&rec)?;
        }
        Ok(())
    }

    pub fn to_log_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_log(&mut out).expect("writing to a Vec");
        out
    }

    pub fn read_log<R: Read>(mut r: R) -> Result<Self, LedgerError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut cur = Cursor::new(&buf);
        if cur.take(8)? != LOG_MAGIC {
            return Err(LedgerError::Format("bad magic".into()));
        }
        let len = cur.u32()? as usize;
        let name = cur.take(len)?;
        if name != HASH_NAME.as_bytes() {
            return Err(LedgerError::Format(format!(
                "unsupported hash {:?}",
                String::from_utf8_lossy(name)
            )));
        }
        let params = ChainParams {
            retarget_interval: cur.u64()?,
            target_block_time: cur.u64()?,
            initial_threshold: cur.hash()?,
            max_trials: cur.u64()?,
        };
        let mut blocks = Vec::new();
        while !cur.done() {
            let len = cur.u32()? as usize;
            blocks.push(Block::from_bytes(cur.take(len)?)?);
        }
        Self::from_blocks(params, blocks)
    }

    /// Rebuilds a chain by replaying blocks in order; the first must be the
    /// genesis block for `params`.
    pub fn from_blocks(params: ChainParams, blocks: Vec<Block>) -> Result<Self, LedgerError> {
        let mut chain = Chain::new(params)?;
        let mut iter = blocks.into_iter();
        match iter.next() {
            Some(g) if g == chain.blocks[0] => {}
            _ => {
                return Err(LedgerError::Format(
                    "genesis does not match chain parameters".into(),
                ))
            }
        }
        for block in iter {
            chain.insert(block)?;
        }
        Ok(chain)
    }

    /// JSON-lines dump: a header line, then one block per line.
    pub fn to_jsonl(&self) -> String {
        let header = JsonHeader {
            hash: HASH_NAME.to_string(),
            retarget_interval: self.params.retarget_interval,
            target_block_time: self.params.target_block_time,
            initial_threshold: hex::encode(self.params.initial_threshold),
            max_trials: self.params.max_trials,
        };
        let mut out = serde_json::to_string(&header).expect("plain struct");
        out.push('\n');
        for b in &self.blocks {
            out.push_str(&serde_json::to_string(&JsonBlock::from(b)).expect("plain struct"));
            out.push('\n');
        }
        out
    }

    /// Re-ingests [`Chain::to_jsonl`] output. Stored hashes must match the
    /// recomputed ones.
    pub fn from_jsonl(text: &str) -> Result<Self, LedgerError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: JsonHeader = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| LedgerError::Format("empty".into()))?,
        )
        .map_err(|e| LedgerError::Format(e.to_string()))?;
        if header.hash != HASH_NAME {
            return Err(LedgerError::Format(format!(
                "unsupported hash {}",
                header.hash
            )));
        }
        let params = ChainParams {
            retarget_interval: header.retarget_interval,
            target_block_time: header.target_block_time,
            initial_threshold: hex32(&header.initial_threshold)?,
            max_trials: header.max_trials,
        };
        let blocks = lines
            .map(|l| {
                let jb: JsonBlock =
                    serde_json::from_str(l).map_err(|e| LedgerError::Format(e.to_string()))?;
                jb.into_block()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_blocks(params, blocks)
    }
}

fn hex32(s: &str) -> Result<Hash256, LedgerError> {
    hex::decode(s)
        .map_err(|e| LedgerError::Format(e.to_string()))?
        .try_into()
        .map_err(|_| LedgerError::Format(format!("expected 32 bytes: {s}")))
}

#[derive(Serialize, Deserialize)]
struct JsonHeader {
    hash: String,
    retarget_interval: u64,
    target_block_time: u64,
    initial_threshold: String,
    max_trials: u64,
}

#[derive(Serialize, Deserialize)]
struct JsonEntry {
    tag: EntryTag,
    serial_key: String,
    public_key: String,
    timestamp: u64,
}

#[derive(Serialize, Deserialize)]
struct JsonBlock {
    height: u64,
    prev_hash: String,
    nonce: u64,
    timestamp: u64,
    threshold: String,
    entries: Vec<JsonEntry>,
    pow_hash: String,
}

impl From<&Block> for JsonBlock {
    fn from(b: &Block) -> Self {
        Self {
            height: b.height,
            prev_hash: hex::encode(b.prev_hash),
            nonce: b.nonce,
            timestamp: b.timestamp,
            threshold: hex::encode(b.threshold),
            entries: b
                .entries
                .iter()
                .map(|e| JsonEntry {
                    tag: e.tag,
                    serial_key: hex::encode(&e.serial_key),
                    public_key: hex::encode(&e.public_key),
                    timestamp: e.timestamp,
                })
                .collect(),
            pow_hash: hex::encode(b.pow_hash),
        }
    }
}

impl JsonBlock {
    fn into_block(self) -> Result<Block, LedgerError> {
        let fmt = |e: hex::FromHexError| LedgerError::Format(e.to_string());
        let block = Block {
            height: self.height,
            prev_hash: hex32(&self.prev_hash)?,
            nonce: self.nonce,
            timestamp: self.timestamp,
            threshold: hex32(&self.threshold)?,
            entries: self
                .entries
                .into_iter()
                .map(|e| {
                    Ok(LedgerEntry {
                        tag: e.tag,
                        serial_key: hex::decode(e.serial_key).map_err(fmt)?,
                        public_key: hex::decode(e.public_key).map_err(fmt)?,
                        timestamp: e.timestamp,
                    })
                })
                .collect::<Result<_, LedgerError>>()?,
            pow_hash: hex32(&self.pow_hash)?,
        };
        if block.compute_hash() != block.pow_hash {
            return Err(LedgerError::Format(format!(
                "block {}: hash does not reproduce",
                block.height
            )));
        }
        Ok(block)
    }
}
