//! Per-shard versioned world state with execute-order-validate processing.
//!
//! The pipeline mirrors a permissioned blockchain's transaction flow:
//!
//! 1. [`simulate_tx`] executes an intent against an immutable snapshot and
//!    captures a [`ReadWriteSet`]; versions appear only in the read set.
//! 2. [`Orderer`] / [`order_and_batch`] packs endorsed transactions into
//!    blocks, closing on a byte-size limit or a batch timeout on the
//!    simulated clock, whichever comes first.
//! 3. [`VersionedWorldState::validate_and_commit`] checks each transaction's
//!    read versions against the live state in block order; valid
//!    transactions apply their writes (bumping versions by exactly 1)
//!    before the next transaction is checked.
//!
//! Two transactions in one block that both read the same key version
//! therefore cannot both commit: only the first is `VALID`, the rest are
//! `MVCC_CONFLICT`. That serialization on hot keys is the bottleneck the
//! composite-key engine is built to remove.
//!
//! Deletes are writes of a tombstone (`value: None`) that still bump the
//! version, keeping the conflict rule uniform across create/update/delete.

pub mod composite;

use std::cell::Cell;
use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::amount::Amount;
use crate::clock::SimTime;
pub use composite::{
    create_composite_key, extends_partial, render_partial, split_composite_key,
    CompositeKeyError, CompositeKeyRecord,
};

pub type Key = String;
pub type Version = u64;

/// Globally unique transaction id assigned at submission.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct TxId(pub u64);

impl std::fmt::Display for TxId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "tx{}", self.0)
    }
}

/// A stored value and its write version. `value: None` is a tombstone left
/// by a delete; the version chain survives deletion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VersionedEntry {
    pub value: Option<String>,
    pub version: Version,
}

/// Captured effects of simulating one intent. Reads carry the observed
/// version (`None` = key absent at the snapshot); writes carry values only
/// (`None` = delete). Keys are unique within each list and sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ReadWriteSet {
    pub reads: Vec<(Key, Option<Version>)>,
    pub writes: Vec<(Key, Option<String>)>,
}

/// What a client asks a shard to do.
#[derive(Debug, Clone)]
pub enum TxIntent {
    /// Move `amount` between two balance keys on the same shard.
    Transfer { from: Key, to: Key, amount: Amount },
    /// Debit `from` and materialize a fresh escrow key holding an opaque
    /// payload. Fails if the escrow key already exists.
    EscrowCreate {
        from: Key,
        escrow_key: Key,
        amount: Amount,
        escrow_value: String,
    },
}

/// Why an intent's own logic rejected during simulation.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum IntentError {
    #[error("amount must be positive")]
    NonPositiveAmount,
    #[error("insufficient balance on {key}: have {have}, need {need}")]
    InsufficientBalance { key: Key, have: Amount, need: Amount },
    #[error("key already exists: {0}")]
    DuplicateKey(Key),
    #[error("value at {0} is not a balance")]
    NotABalance(Key),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("intent failed: {0}")]
    IntentFailed(#[from] IntentError),
    #[error(transparent)]
    CompositeKey(#[from] CompositeKeyError),
}

/// Per-transaction validation outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Verdict {
    Valid,
    MvccConflict,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Valid => "VALID",
            Verdict::MvccConflict => "MVCC_CONFLICT",
        })
    }
}

/// An endorsed transaction: simulated, signed off, waiting to be ordered.
#[derive(Debug, Clone, Serialize)]
pub struct EndorsedTx {
    pub id: TxId,
    pub rwset: ReadWriteSet,
    pub byte_size: u64,
    pub submitted_at: SimTime,
}

#[derive(Debug, Clone, Serialize)]
pub struct Block {
    pub height: u64,
    pub txs: Vec<EndorsedTx>,
    pub byte_size: u64,
    /// Instant the batch timeout would close this block's window.
    pub formation_deadline: SimTime,
    /// Instant the block actually left the orderer (size close can precede
    /// the deadline).
    pub closed_at: SimTime,
}

/// Observable work counters; entry scans feed the query-cost comparisons.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LedgerStats {
    pub reads: u64,
    pub writes: u64,
    pub entries_scanned: u64,
    pub blocks_committed: u64,
    pub txs_valid: u64,
    pub txs_conflicted: u64,
}

/// One shard's world state: key, value, version triples plus commit height.
#[derive(Debug, Clone, Default)]
pub struct VersionedWorldState {
    entries: BTreeMap<Key, VersionedEntry>,
    height: u64,
    writes: u64,
    blocks_committed: u64,
    txs_valid: u64,
    txs_conflicted: u64,
    // Read-path counters; interior mutability keeps read APIs `&self`.
    reads: Cell<u64>,
    entries_scanned: Cell<u64>,
}

impl VersionedWorldState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&VersionedEntry> {
        self.reads.set(self.reads.get() + 1);
        self.entries.get(key)
    }

    /// Version of `key`, including tombstoned keys. `None` = never written.
    pub fn version_of(&self, key: &str) -> Option<Version> {
        self.get(key).map(|e| e.version)
    }

    /// Live value of `key`; tombstones and absent keys read as `None`.
    pub fn value_of(&self, key: &str) -> Option<&str> {
        self.get(key).and_then(|e| e.value.as_deref())
    }

    /// Parse the live value as a canonical decimal; absent keys are zero.
    pub fn balance_of(&self, key: &str) -> Result<Amount, IntentError> {
        match self.value_of(key) {
            None => Ok(Amount::ZERO),
            Some(v) => v
                .parse()
                .map_err(|_| IntentError::NotABalance(key.to_string())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Key, &VersionedEntry)> {
        self.entries.iter()
    }

    /// Write one value (or tombstone), bumping the key's version. First
    /// write to a key creates it at version 0.
    fn put(&mut self, key: &str, value: Option<&str>) {
        self.writes += 1;
        match self.entries.get_mut(key) {
            Some(entry) => {
                entry.version += 1;
                entry.value = value.map(str::to_string);
            }
            None => {
                self.entries.insert(
                    key.to_string(),
                    VersionedEntry {
                        value: value.map(str::to_string),
                        version: 0,
                    },
                );
            }
        }
    }

    /// Apply writes outside block validation. This is the serialized
    /// committer path used for genesis funding and for settlement effects
    /// already agreed through the engine; versions still bump so any
    /// in-flight read of a touched key conflicts at validation.
    pub fn apply_system_writes(&mut self, writes: &[(Key, Option<String>)]) {
        for (key, value) in writes {
            self.put(key, value.as_deref());
        }
    }

    /// Fund `key` with a starting balance (genesis write).
    pub fn seed_account(&mut self, key: &str, balance: Amount) {
        self.put(key, Some(&balance.to_canonical_string()));
    }

    /// Validate a block in order and apply valid transactions immediately.
    ///
    /// A transaction is `VALID` iff every read-set entry's version equals
    /// the current version at validation time; its writes land before the
    /// next transaction in the block is checked.
    pub fn validate_and_commit(&mut self, block: &Block) -> Vec<Verdict> {
        assert_eq!(
            block.height,
            self.height + 1,
            "blocks must commit in height order"
        );
        let mut verdicts = Vec::with_capacity(block.txs.len());
        for tx in &block.txs {
            let clean = tx
                .rwset
                .reads
                .iter()
                .all(|(key, ver)| self.entries.get(key).map(|e| e.version) == *ver);
            if clean {
                for (key, value) in &tx.rwset.writes {
                    self.put(key, value.as_deref());
                }
                self.txs_valid += 1;
                verdicts.push(Verdict::Valid);
            } else {
                self.txs_conflicted += 1;
                verdicts.push(Verdict::MvccConflict);
            }
        }
        self.height = block.height;
        self.blocks_committed += 1;
        verdicts
    }

    /// All stored composite keys matching `prefix` and `leading_attrs`, with
    /// their live values, in lexicographic key order. Tombstoned keys cost
    /// nothing: a state database deletes them physically.
    pub fn get_state_by_partial_composite_key(
        &self,
        prefix: &str,
        leading_attrs: &[impl AsRef<str>],
    ) -> Result<Vec<CompositeHit>, CompositeKeyError> {
        let partial = render_partial(prefix, leading_attrs)?;
        let mut hits = Vec::new();
        let mut scanned = 0u64;
        for (key, entry) in self.entries.range(partial.clone()..) {
            if !key.as_bytes().starts_with(partial.as_bytes()) {
                break;
            }
            if !extends_partial(key, &partial) {
                continue;
            }
            // Deleted keys are physically removed from a state database, so
            // they cost the iterator nothing.
            let Some(value) = entry.value.as_ref() else {
                continue;
            };
            scanned += 1;
            let record = split_composite_key(key)?;
            hits.push(CompositeHit {
                record,
                value: value.clone(),
                version: entry.version,
            });
        }
        self.entries_scanned
            .set(self.entries_scanned.get() + scanned);
        Ok(hits)
    }

    pub fn stats(&self) -> LedgerStats {
        LedgerStats {
            reads: self.reads.get(),
            writes: self.writes,
            entries_scanned: self.entries_scanned.get(),
            blocks_committed: self.blocks_committed,
            txs_valid: self.txs_valid,
            txs_conflicted: self.txs_conflicted,
        }
    }

    /// Debug dump: key → {value, version}, keys sorted.
    pub fn to_json(&self) -> serde_json::Value {
        let entries: serde_json::Map<String, serde_json::Value> = self
            .entries
            .iter()
            .map(|(k, e)| {
                (
                    k.clone(),
                    serde_json::json!({ "value": e.value, "version": e.version }),
                )
            })
            .collect();
        serde_json::json!({ "height": self.height, "entries": entries })
    }
}

/// A composite-key query hit: the parsed key plus its stored value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompositeHit {
    pub record: CompositeKeyRecord,
    pub value: String,
    pub version: Version,
}

/// Wire-size estimate of an endorsed transaction: write payloads, a fixed
/// cost per read-set entry, and a fixed envelope overhead.
pub fn endorsement_byte_size(rwset: &ReadWriteSet) -> u64 {
    rwset
        .writes
        .iter()
        .map(|(k, v)| k.len() as u64 + v.as_deref().map_or(0, |v| v.len() as u64))
        .sum::<u64>()
        + rwset.reads.len() as u64 * 40
        + 96
}

/// Execute `intent` against an immutable snapshot of the shard state,
/// producing the read/write sets. The snapshot is never modified; the
/// simulation sees its own pending writes (debit before credit).
pub fn simulate_tx(
    intent: &TxIntent,
    snapshot: &VersionedWorldState,
) -> Result<ReadWriteSet, LedgerError> {
    let mut sim = TxSimulation::new(snapshot);
    match intent {
        TxIntent::Transfer { from, to, amount } => {
            if !amount.is_positive() {
                return Err(IntentError::NonPositiveAmount.into());
            }
            let from_bal = sim.read_balance(from)?;
            if from_bal < *amount {
                return Err(IntentError::InsufficientBalance {
                    key: from.clone(),
                    have: from_bal,
                    need: *amount,
                }
                .into());
            }
            sim.write_balance(from, from_bal - *amount);
            let to_bal = sim.read_balance(to)?;
            sim.write_balance(to, to_bal + *amount);
        }
        TxIntent::EscrowCreate {
            from,
            escrow_key,
            amount,
            escrow_value,
        } => {
            if !amount.is_positive() {
                return Err(IntentError::NonPositiveAmount.into());
            }
            if sim.read(escrow_key).is_some() {
                return Err(IntentError::DuplicateKey(escrow_key.clone()).into());
            }
            let from_bal = sim.read_balance(from)?;
            if from_bal < *amount {
                return Err(IntentError::InsufficientBalance {
                    key: from.clone(),
                    have: from_bal,
                    need: *amount,
                }
                .into());
            }
            sim.write_balance(from, from_bal - *amount);
            sim.write(escrow_key, Some(escrow_value.clone()));
        }
    }
    Ok(sim.finish())
}

/// Working context for one intent simulation: records reads at the snapshot
/// version and overlays pending writes for read-your-own-writes.
struct TxSimulation<'a> {
    snapshot: &'a VersionedWorldState,
    reads: BTreeMap<Key, Option<Version>>,
    writes: BTreeMap<Key, Option<String>>,
}

impl<'a> TxSimulation<'a> {
    fn new(snapshot: &'a VersionedWorldState) -> Self {
        TxSimulation {
            snapshot,
            reads: BTreeMap::new(),
            writes: BTreeMap::new(),
        }
    }

    /// Live value as seen by this transaction (own writes win), recording
    /// the snapshot version on first physical access.
    fn read(&mut self, key: &str) -> Option<String> {
        if let Some(pending) = self.writes.get(key) {
            return pending.clone();
        }
        let entry = self.snapshot.get(key);
        self.reads
            .entry(key.to_string())
            .or_insert_with(|| entry.map(|e| e.version));
        entry.and_then(|e| e.value.clone())
    }

    fn read_balance(&mut self, key: &str) -> Result<Amount, IntentError> {
        match self.read(key) {
            None => Ok(Amount::ZERO),
            Some(v) => v.parse().map_err(|_| IntentError::NotABalance(key.into())),
        }
    }

    fn write(&mut self, key: &str, value: Option<String>) {
        self.writes.insert(key.to_string(), value);
    }

    fn write_balance(&mut self, key: &str, balance: Amount) {
        self.write(key, Some(balance.to_canonical_string()));
    }

    fn finish(self) -> ReadWriteSet {
        ReadWriteSet {
            reads: self.reads.into_iter().collect(),
            writes: self.writes.into_iter().collect(),
        }
    }
}

/// Streaming block former. Feed endorsed transactions as they arrive and
/// flush when the batch timeout fires; both paths preserve arrival order.
#[derive(Debug)]
pub struct Orderer {
    block_size_limit: u64,
    batch_timeout: SimTime,
    pending: Vec<EndorsedTx>,
    pending_bytes: u64,
    window_open: Option<SimTime>,
    next_height: u64,
}

impl Orderer {
    pub fn new(block_size_limit: u64, batch_timeout: SimTime) -> Self {
        Orderer {
            block_size_limit,
            batch_timeout,
            pending: Vec::new(),
            pending_bytes: 0,
            window_open: None,
            next_height: 1,
        }
    }

    /// Deadline of the currently open window, if any.
    pub fn deadline(&self) -> Option<SimTime> {
        self.window_open.map(|t| t + self.batch_timeout)
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Accept a transaction at simulated instant `now`. Returns a block if
    /// adding this transaction would push the open window past the size
    /// limit; the block holds the previously pending transactions and the
    /// new one starts the next window.
    pub fn offer(&mut self, tx: EndorsedTx, now: SimTime) -> Option<Block> {
        debug_assert!(
            self.deadline().is_none_or(|d| now < d),
            "window overdue; flush_due must run before later arrivals"
        );
        let mut emitted = None;
        if !self.pending.is_empty() && self.pending_bytes + tx.byte_size > self.block_size_limit {
            emitted = Some(self.close(now));
        }
        if self.pending.is_empty() {
            self.window_open = Some(now);
        }
        self.pending_bytes += tx.byte_size;
        self.pending.push(tx);
        emitted
    }

    /// Close the window if its deadline has arrived.
    pub fn flush_due(&mut self, now: SimTime) -> Option<Block> {
        match self.deadline() {
            Some(deadline) if now >= deadline => Some(self.close(deadline)),
            _ => None,
        }
    }

    /// Force out whatever is pending (end of run).
    pub fn flush(&mut self, now: SimTime) -> Option<Block> {
        if self.pending.is_empty() {
            None
        } else {
            Some(self.close(now))
        }
    }

    fn close(&mut self, closed_at: SimTime) -> Block {
        let window_open = self.window_open.take().expect("closing an empty window");
        let txs = std::mem::take(&mut self.pending);
        let byte_size = std::mem::replace(&mut self.pending_bytes, 0);
        let height = self.next_height;
        self.next_height += 1;
        Block {
            height,
            txs,
            byte_size,
            formation_deadline: window_open + self.batch_timeout,
            closed_at,
        }
    }
}

/// Batch-mode ordering over a finished, arrival-sorted stream. Windows open
/// at the first pending transaction and close at the earlier of the size
/// limit being exceeded or the batch timeout; empty windows emit nothing.
pub fn order_and_batch(
    txs: impl IntoIterator<Item = EndorsedTx>,
    block_size_limit: u64,
    batch_timeout: SimTime,
) -> Vec<Block> {
    let mut orderer = Orderer::new(block_size_limit, batch_timeout);
    let mut blocks = Vec::new();
    let mut last_arrival = SimTime::ZERO;
    for tx in txs {
        assert!(
            tx.submitted_at >= last_arrival,
            "order_and_batch expects arrival-sorted input"
        );
        last_arrival = tx.submitted_at;
        // A tx arriving exactly at the deadline belongs to the next window:
        // the timeout fires before same-instant arrivals are processed.
        while let Some(deadline) = orderer.deadline() {
            if tx.submitted_at < deadline {
                break;
            }
            blocks.extend(orderer.flush_due(deadline));
        }
        let at = tx.submitted_at;
        blocks.extend(orderer.offer(tx, at));
    }
    if let Some(deadline) = orderer.deadline() {
        blocks.extend(orderer.flush_due(deadline));
    }
    blocks
}
