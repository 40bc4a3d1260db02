//! Cross-shard transaction engine built on composite-key virtual sub-brokers.
//!
//! A cross-shard transfer (CSTx) moves value from an initiator account on a
//! source shard to a receiver account on a target shard through an
//! intermediary funded on both. The naive scheme debits the initiator and
//! credits the intermediary's single account key, so every concurrent CSTx
//! through that intermediary contends on one MVCC key. This engine instead
//! escrows each transfer under a per-CSTx composite key
//! `"cstx" \0 g \0 initiator \0 receiver \0 cipher-hex` (a virtual
//! sub-broker): a batch of k transfers through one intermediary writes k
//! distinct keys and commits without conflicts.
//!
//! Pooled entries settle periodically: a fuzzy partial-key query collects
//! the intermediary's entries, the encrypted amounts are converted into a
//! homomorphic vector and summed under ciphertext, an encrypted exchange
//! rate is applied, and only the aggregate is decoded. Receivers are then
//! credited from the intermediary's target-side funds while the escrow is
//! released to its source-side account.
//!
//! Two bookkeeping domains never mix:
//! - Ledger mutations (escrow, refunds, credits) use exact fixed-point
//!   arithmetic, so per-shard totals are conserved exactly on either
//!   homomorphic backend.
//! - Decoded homomorphic aggregates are audit values; they appear in
//!   settlement records and are compared against the exact totals but never
//!   move funds.
//!
//! The engine is a single-threaded protocol core: an outer event loop (or a
//! test) feeds it arrivals, window flushes and settlement ticks with an
//! explicit virtual `now`.

mod settle;
#[cfg(test)]
mod tests;

pub use settle::Accumulation;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::amount::{Amount, Rate};
use crate::clock::{SimTime, VirtualClock};
use crate::crypto::{
    AmountCipher, CipherVector, CryptoError, HeBackend, HeBackendKind, HeKeyset, HeParams,
    KeyStore, PartyId, Role,
};
use crate::ledger::{
    create_composite_key, simulate_tx, Block, EndorsedTx, IntentError, LedgerError, Orderer,
    TxId, TxIntent, Verdict, VersionedWorldState,
};

pub type ShardId = usize;
/// Engine-local handle for one CSTx; dense indices into the transaction log.
pub type TxUid = u64;

/// Lifecycle of a cross-shard transaction.
///
/// Forward path: INITIATED → POOLED → ACCUMULATED → COMPLETED. Any
/// pre-completion state may fall to ROLLED_BACK; terminal states never move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CstxStatus {
    Initiated,
    Pooled,
    Accumulated,
    Completed,
    RolledBack,
}

impl CstxStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, CstxStatus::Completed | CstxStatus::RolledBack)
    }

    fn may_become(self, next: CstxStatus) -> bool {
        use CstxStatus::*;
        match (self, next) {
            (Initiated, Pooled) | (Pooled, Accumulated) | (Accumulated, Completed) => true,
            (Initiated | Pooled | Accumulated, RolledBack) => true,
            _ => false,
        }
    }
}

impl std::fmt::Display for CstxStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CstxStatus::Initiated => "INITIATED",
            CstxStatus::Pooled => "POOLED",
            CstxStatus::Accumulated => "ACCUMULATED",
            CstxStatus::Completed => "COMPLETED",
            CstxStatus::RolledBack => "ROLLED_BACK",
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum EngineError {
    #[error("unknown account: {0}")]
    UnknownAccount(PartyId),
    #[error("unknown intermediary: {0}")]
    UnknownIntermediary(PartyId),
    #[error("unknown transaction: {0}")]
    UnknownTx(TxUid),
    #[error("{account} is on shard {actual}, route needs shard {expected}")]
    RouteMismatch {
        account: PartyId,
        expected: ShardId,
        actual: ShardId,
    },
    #[error("amount must be positive")]
    NegativeAmount,
    #[error("insufficient balance on {account}: available {available}, need {needed}")]
    InsufficientBalance {
        account: PartyId,
        available: Amount,
        needed: Amount,
    },
    #[error("duplicate key: {0}")]
    DuplicateKey(String),
    #[error("pool for {0} is empty")]
    EmptyPool(PartyId),
    #[error("{intermediary} target-side liquidity {available} below required {needed}")]
    LiquidityShortfall {
        intermediary: PartyId,
        available: Amount,
        needed: Amount,
    },
    #[error("rounding residue {residue} exceeds bound {bound}")]
    RoundingResidue { residue: Amount, bound: Amount },
    #[error("transaction {0} already completed")]
    AlreadyCompleted(TxUid),
    #[error("intermediary {0} is down")]
    IntermediaryDown(PartyId),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// One cross-shard transaction as the engine tracks it. The plaintext
/// amount is client-side knowledge (the initiator built the transfer); it
/// never flows through intermediary-facing interfaces, which see only the
/// transport ciphertext embedded in the composite key.
#[derive(Debug, Clone)]
pub struct CrossShardTx {
    pub uid: TxUid,
    pub initiator: PartyId,
    pub receiver: PartyId,
    pub intermediary: PartyId,
    pub source_shard: ShardId,
    pub target_shard: ShardId,
    pub cipher: AmountCipher,
    pub initiated_at: SimTime,
    pub status: CstxStatus,
    pub terminal_at: Option<SimTime>,
    /// Rendered composite key of this transfer's virtual sub-broker entry.
    pub composite_key: String,
    /// Ordering attempts spent by the escrow debit (MVCC retries).
    pub debit_attempts: u32,
    pub(crate) amount: Amount,
    /// Unsettled inbound credits this transfer's admission leaned on.
    deps: Vec<TxUid>,
    /// Committed-minus-reserved balance observed at admission.
    admission_base: Amount,
    admitted: bool,
}

/// Wire form of an initiated CSTx: everything a relaying intermediary may
/// see. The amount travels only as the transport ciphertext.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CstxMessage {
    pub initiator: PartyId,
    pub receiver: PartyId,
    pub intermediary: PartyId,
    pub v_cipher_hex: String,
    pub ts: u64,
}

/// Entry in the settlement's pending transfer set: one receiver plus the
/// ciphertext(s) that will fund the credit.
#[derive(Debug, Clone)]
pub struct PendingItem {
    pub receiver: PartyId,
    pub source: PendingSource,
}

#[derive(Debug, Clone)]
pub enum PendingSource {
    /// A single pooled transfer; the amount is the transport ciphertext
    /// from the composite key, decrypted per owner during completion.
    Raw {
        owner: PartyId,
        cipher: AmountCipher,
        uid: TxUid,
    },
    /// A merged pool entry's per-receiver accumulator (already in the
    /// homomorphic domain), covering every listed transfer.
    Merged { cipher: CipherVector, uids: Vec<TxUid> },
}

impl PendingItem {
    pub fn tx_count(&self) -> usize {
        match &self.source {
            PendingSource::Raw { .. } => 1,
            PendingSource::Merged { uids, .. } => uids.len(),
        }
    }
}

/// Split results of the intermediary's pool entries at settlement time.
#[derive(Debug, Clone)]
pub struct PendingTransferSet {
    pub intermediary: PartyId,
    pub items: Vec<PendingItem>,
}

impl PendingTransferSet {
    pub fn tx_count(&self) -> usize {
        self.items.iter().map(PendingItem::tx_count).sum()
    }
}

/// Ciphertext products of one settlement plus their decoded audit values.
#[derive(Debug, Clone)]
pub struct SettlementResult {
    pub c_sum: CipherVector,
    pub c_final_sum: CipherVector,
    /// Decoded aggregate outflow (source-side units). Audit value.
    pub out_amount: f64,
    /// Decoded aggregate inflow after the rate (target-side units). Audit
    /// value.
    pub in_amount: f64,
    pub rate: Rate,
}

/// Everything one settlement did, in both domains.
#[derive(Debug, Clone)]
pub struct SettlementReport {
    pub intermediary: PartyId,
    pub period: u64,
    pub n_txs: usize,
    pub result: SettlementResult,
    pub pending: PendingTransferSet,
    /// Exact fixed-point totals that actually moved funds.
    pub out_exact: Amount,
    pub in_exact: Amount,
    /// Per-receiver credits, grouped and sorted by receiver.
    pub credits: Vec<(PartyId, Amount)>,
    /// Ledger entries touched by the fuzzy pool query (query-cost proxy).
    pub entries_scanned: u64,
    pub completed: Vec<TxUid>,
}

/// Audit line appended after every non-empty settlement.
#[derive(Debug, Clone, Serialize)]
pub struct SettlementAudit {
    pub intermediary: PartyId,
    pub period: u64,
    pub out_amount: f64,
    pub in_amount: f64,
    pub rate: f64,
    pub n_txs: usize,
}

/// What happened to one flushed block of escrow debits.
#[derive(Debug, Clone)]
pub struct BlockOutcome {
    pub shard: ShardId,
    pub height: u64,
    pub committed: usize,
    pub conflicted: usize,
    /// Intermediaries whose pool crossed the size cap in this block and
    /// should settle early.
    pub cap_due: Vec<PartyId>,
}

/// How an admitted transfer proceeded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    /// The escrow debit was simulated and offered for ordering.
    Submitted,
    /// Admission leaned on unsettled inbound credits; the debit waits until
    /// they land.
    Parked,
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    /// Periodic settlement threshold per intermediary.
    pub t_settle: SimTime,
    /// Pool size that triggers settlement before the period elapses.
    pub pool_cap: usize,
    /// Source-to-target exchange rate, also held encrypted as C_rate.
    pub rate: Rate,
    pub backend_kind: HeBackendKind,
    pub he_params: HeParams,
    /// Block formation limits for the escrow-debit pipeline.
    pub block_size_limit: u64,
    pub batch_timeout: SimTime,
    /// Ordering attempts an escrow debit may spend on MVCC conflicts.
    pub max_debit_retries: u32,
    pub noise_seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            t_settle: SimTime::from_millis(2_000),
            pool_cap: 10_000,
            rate: Rate::ONE,
            backend_kind: HeBackendKind::Approximate,
            he_params: HeParams::default(),
            block_size_limit: 40 * 1024 * 1024,
            batch_timeout: SimTime::from_millis(2_000),
            max_debit_retries: 50,
            noise_seed: 7,
        }
    }
}

/// A pooled composite-key entry as the engine indexes it. The ledger holds
/// the authoritative bytes; this mirror carries the engine-side linkage.
#[derive(Debug, Clone)]
pub(crate) enum PoolSlot {
    Raw {
        uid: TxUid,
    },
    Merged {
        intermediary: PartyId,
        initiator: PartyId,
        /// Receiver → homomorphic accumulator of that receiver's merged
        /// amounts.
        payload: BTreeMap<PartyId, CipherVector>,
        members: Vec<MergedMember>,
    },
}

#[derive(Debug, Clone)]
pub(crate) struct MergedMember {
    pub uid: TxUid,
    pub receiver: PartyId,
}

#[derive(Debug, Clone)]
struct AccountInfo {
    shard: ShardId,
}

#[derive(Debug, Clone)]
pub(crate) struct Intermediary {
    pub source_shard: ShardId,
    pub target_shard: ShardId,
    pub live: bool,
}

/// Per-account admission bookkeeping.
#[derive(Debug, Default)]
struct Flight {
    /// Admitted transfers whose escrow debit has not committed yet.
    pending_out: Vec<TxUid>,
    /// Pooled transfers whose settlement will credit this account.
    pending_in: Vec<TxUid>,
}

struct Shard {
    state: VersionedWorldState,
    orderer: Orderer,
    /// Ledger tx id → engine uid for debits in the ordering pipeline.
    inflight: BTreeMap<u64, TxUid>,
    /// Exact value held by unsettled virtual sub-broker entries.
    escrow: Amount,
}

pub struct CrossShardEngine {
    cfg: EngineConfig,
    store: Arc<KeyStore>,
    backend: HeBackend,
    keyset: HeKeyset,
    c_rate: CipherVector,
    clock: VirtualClock,
    rng: ChaCha8Rng,
    shards: Vec<Shard>,
    accounts: BTreeMap<PartyId, AccountInfo>,
    intermediaries: BTreeMap<PartyId, Intermediary>,
    txs: Vec<CrossShardTx>,
    /// Rendered composite key → pool slot, across all shards (keys embed
    /// the intermediary, so they never collide).
    pool: BTreeMap<String, PoolSlot>,
    flights: BTreeMap<PartyId, Flight>,
    /// Initiator → admitted transfers waiting for inbound credits.
    parked: BTreeMap<PartyId, Vec<TxUid>>,
    /// Credit source → transfers whose admission counted it.
    dependents: BTreeMap<TxUid, Vec<TxUid>>,
    audits: Vec<SettlementAudit>,
    reuse_audits: Vec<crate::reuse::ReuseAudit>,
    periods: BTreeMap<PartyId, u64>,
    next_ledger_tx: u64,
    mvcc_conflicts: u64,
    debit_retries: u64,
}

impl CrossShardEngine {
    pub fn new(cfg: EngineConfig, shard_count: usize) -> Self {
        assert!(shard_count >= 1, "need at least one shard");
        let store = KeyStore::new();
        let backend = HeBackend::new(cfg.backend_kind, cfg.he_params.clone(), cfg.noise_seed)
            .expect("engine config carries valid backend parameters");
        let keyset = store.generate_he_keyset(SimTime::ZERO);
        let c_rate = backend.he_encrypt(&keyset, &backend.he_encode_rate(cfg.rate));
        let shards = (0..shard_count)
            .map(|_| Shard {
                state: VersionedWorldState::new(),
                orderer: Orderer::new(cfg.block_size_limit, cfg.batch_timeout),
                inflight: BTreeMap::new(),
                escrow: Amount::ZERO,
            })
            .collect();
        CrossShardEngine {
            rng: ChaCha8Rng::seed_from_u64(cfg.noise_seed ^ 0x5eed),
            store,
            backend,
            keyset,
            c_rate,
            clock: VirtualClock::new(),
            shards,
            accounts: BTreeMap::new(),
            intermediaries: BTreeMap::new(),
            txs: Vec::new(),
            pool: BTreeMap::new(),
            flights: BTreeMap::new(),
            parked: BTreeMap::new(),
            dependents: BTreeMap::new(),
            audits: Vec::new(),
            reuse_audits: Vec::new(),
            periods: BTreeMap::new(),
            next_ledger_tx: 0,
            mvcc_conflicts: 0,
            debit_retries: 0,
            cfg,
        }
    }

    pub fn account_key(name: &str) -> String {
        format!("acct:{name}")
    }

    /// Seed a client account on a shard (genesis write).
    pub fn add_account(
        &mut self,
        name: &str,
        shard: ShardId,
        balance: Amount,
    ) -> Result<(), EngineError> {
        assert!(shard < self.shards.len(), "shard {shard} out of range");
        if self.accounts.contains_key(name) || self.intermediaries.contains_key(name) {
            return Err(EngineError::DuplicateKey(name.to_string()));
        }
        self.accounts.insert(name.to_string(), AccountInfo { shard });
        self.shards[shard]
            .state
            .seed_account(&Self::account_key(name), balance);
        Ok(())
    }

    /// Register an intermediary bridging one shard pair, funded on both
    /// sides.
    pub fn add_intermediary(
        &mut self,
        name: &str,
        source_shard: ShardId,
        target_shard: ShardId,
        source_balance: Amount,
        target_balance: Amount,
    ) -> Result<(), EngineError> {
        assert!(source_shard < self.shards.len() && target_shard < self.shards.len());
        assert_ne!(source_shard, target_shard, "intermediaries bridge two shards");
        if self.accounts.contains_key(name) || self.intermediaries.contains_key(name) {
            return Err(EngineError::DuplicateKey(name.to_string()));
        }
        self.intermediaries.insert(
            name.to_string(),
            Intermediary {
                source_shard,
                target_shard,
                live: true,
            },
        );
        let key = Self::account_key(name);
        self.shards[source_shard].state.seed_account(&key, source_balance);
        self.shards[target_shard].state.seed_account(&key, target_balance);
        Ok(())
    }

    /// Build a CSTx: encrypt the amount under the initiator's transport key
    /// with a unique timestamp and render the virtual sub-broker key.
    /// Status starts at INITIATED; nothing touches the ledger yet.
    pub fn initiate_cstx(
        &mut self,
        initiator: &str,
        receiver: &str,
        intermediary: &str,
        amount: Amount,
        now: SimTime,
    ) -> Result<TxUid, EngineError> {
        if !amount.is_positive() {
            return Err(EngineError::NegativeAmount);
        }
        let inter = self
            .intermediaries
            .get(intermediary)
            .ok_or_else(|| EngineError::UnknownIntermediary(intermediary.to_string()))?
            .clone();
        if !inter.live {
            return Err(EngineError::IntermediaryDown(intermediary.to_string()));
        }
        let src = self.account_shard(initiator)?;
        let dst = self.account_shard(receiver)?;
        if src != inter.source_shard {
            return Err(EngineError::RouteMismatch {
                account: initiator.to_string(),
                expected: inter.source_shard,
                actual: src,
            });
        }
        if dst != inter.target_shard {
            return Err(EngineError::RouteMismatch {
                account: receiver.to_string(),
                expected: inter.target_shard,
                actual: dst,
            });
        }
        // Unique timestamp per transfer: simultaneous identical transfers
        // still produce distinct ciphertexts and distinct composite keys.
        self.clock.advance_to(now);
        let ts = self.clock.unique_timestamp();
        self.store
            .register_transport_key(initiator, &mut self.rng, now);
        let key = self
            .store
            .transport_key(Role::Initiator, initiator, initiator, now)?;
        let cipher = key.encrypt(amount, ts)?;
        let composite_key = create_composite_key(
            "cstx",
            &[intermediary, initiator, receiver, &cipher.to_hex()],
        )
        .map_err(LedgerError::from)?;
        let uid = self.txs.len() as TxUid;
        self.txs.push(CrossShardTx {
            uid,
            initiator: initiator.to_string(),
            receiver: receiver.to_string(),
            intermediary: intermediary.to_string(),
            source_shard: src,
            target_shard: dst,
            cipher,
            initiated_at: now,
            status: CstxStatus::Initiated,
            terminal_at: None,
            composite_key,
            debit_attempts: 0,
            amount,
            deps: Vec::new(),
            admission_base: Amount::ZERO,
            admitted: false,
        });
        Ok(uid)
    }

    /// Wire form of an initiated transfer.
    pub fn message(&self, uid: TxUid) -> Result<CstxMessage, EngineError> {
        let tx = self.tx(uid)?;
        Ok(CstxMessage {
            initiator: tx.initiator.clone(),
            receiver: tx.receiver.clone(),
            intermediary: tx.intermediary.clone(),
            v_cipher_hex: tx.cipher.to_hex(),
            ts: tx.cipher.tx_timestamp.as_nanos(),
        })
    }

    /// Admit a transfer and stage its source-shard escrow debit.
    ///
    /// The admission check is timestamp-ordered per initiator: committed
    /// balance, minus debits already admitted but not yet committed, plus
    /// unsettled inbound credits, must cover the amount. A transfer that
    /// leans on inbound credits parks until they settle; rolling the credit
    /// source back rolls the dependent back too.
    pub fn preprocess(&mut self, uid: TxUid, now: SimTime) -> Result<Admission, EngineError> {
        let tx = self.tx(uid)?.clone();
        if tx.admitted
            || tx.status != CstxStatus::Initiated
            || self.pool.contains_key(&tx.composite_key)
            || self.shards[tx.source_shard]
                .state
                .value_of(&tx.composite_key)
                .is_some()
        {
            // Covers both a replayed preprocess of the same transfer and a
            // colliding sub-broker key.
            return Err(EngineError::DuplicateKey(tx.composite_key));
        }
        if !self.intermediaries[&tx.intermediary].live {
            self.transition(uid, CstxStatus::RolledBack, now);
            return Err(EngineError::IntermediaryDown(tx.intermediary));
        }

        let base = self.admission_base(&tx.initiator, None)?;
        let credits = self.unsettled_credits(&tx.initiator)?;
        let credit_total: Amount = credits.iter().map(|(_, a)| *a).sum();
        let available = base + credit_total;
        if available < tx.amount {
            self.transition(uid, CstxStatus::RolledBack, now);
            return Err(EngineError::InsufficientBalance {
                account: tx.initiator,
                available,
                needed: tx.amount,
            });
        }

        {
            let me = &mut self.txs[uid as usize];
            me.admitted = true;
            me.admission_base = base;
        }
        self.flights
            .entry(tx.initiator.clone())
            .or_default()
            .pending_out
            .push(uid);

        if base >= tx.amount {
            self.simulate_and_offer(uid, now)?;
            Ok(Admission::Submitted)
        } else {
            // Solvent only through unsettled credits: record the
            // dependency edges and wait for them to land.
            let deps: Vec<TxUid> = credits.iter().map(|(u, _)| *u).collect();
            for d in &deps {
                self.dependents.entry(*d).or_default().push(uid);
            }
            self.txs[uid as usize].deps = deps;
            self.parked.entry(tx.initiator).or_default().push(uid);
            Ok(Admission::Parked)
        }
    }

    /// Committed balance minus admitted-but-uncommitted debits. When
    /// rechecking an already-admitted transfer, its own reservation is
    /// excluded so it does not count against itself.
    pub(crate) fn admission_base(
        &self,
        account: &str,
        excluding: Option<TxUid>,
    ) -> Result<Amount, EngineError> {
        let shard = self.account_shard(account)?;
        let committed = self.shards[shard]
            .state
            .balance_of(&Self::account_key(account))
            .map_err(|e| EngineError::Ledger(e.into()))?;
        let reserved: Amount = self
            .flights
            .get(account)
            .map(|f| {
                f.pending_out
                    .iter()
                    .filter(|u| Some(**u) != excluding)
                    .map(|u| self.txs[*u as usize].amount)
                    .sum()
            })
            .unwrap_or(Amount::ZERO);
        Ok(committed - reserved)
    }

    /// Unsettled inbound credits for an account: pooled transfers that will
    /// pay it `amount × rate` at settlement.
    fn unsettled_credits(&self, account: &str) -> Result<Vec<(TxUid, Amount)>, EngineError> {
        let Some(flight) = self.flights.get(account) else {
            return Ok(Vec::new());
        };
        let mut credits = Vec::new();
        for &u in &flight.pending_in {
            let tx = &self.txs[u as usize];
            debug_assert!(matches!(
                tx.status,
                CstxStatus::Pooled | CstxStatus::Accumulated
            ));
            credits.push((u, tx.amount.mul_rate(self.cfg.rate).expect("bounded amounts")));
        }
        Ok(credits)
    }

    /// Simulate the escrow debit against the current source-shard state and
    /// offer it for ordering. A size-closed block is processed on the spot.
    fn simulate_and_offer(&mut self, uid: TxUid, now: SimTime) -> Result<(), EngineError> {
        let tx = self.txs[uid as usize].clone();
        let shard = tx.source_shard;
        let intent = TxIntent::EscrowCreate {
            from: Self::account_key(&tx.initiator),
            escrow_key: tx.composite_key.clone(),
            amount: tx.amount,
            escrow_value: "held".to_string(),
        };
        let rwset = match simulate_tx(&intent, &self.shards[shard].state) {
            Ok(rw) => rw,
            Err(LedgerError::IntentFailed(IntentError::InsufficientBalance { .. })) => {
                // Admission said yes, committed funds say not yet: wait for
                // the credits admission counted.
                self.parked
                    .entry(tx.initiator.clone())
                    .or_default()
                    .push(uid);
                return Ok(());
            }
            Err(LedgerError::IntentFailed(IntentError::DuplicateKey(k))) => {
                return Err(EngineError::DuplicateKey(k))
            }
            Err(e) => return Err(e.into()),
        };
        let byte_size = crate::ledger::endorsement_byte_size(&rwset);
        let id = TxId(self.next_ledger_tx);
        self.next_ledger_tx += 1;
        self.txs[uid as usize].debit_attempts += 1;
        self.shards[shard].inflight.insert(id.0, uid);
        let endorsed = EndorsedTx {
            id,
            rwset,
            byte_size,
            submitted_at: now,
        };
        if let Some(block) = self.shards[shard].orderer.offer(endorsed, now) {
            self.process_block(shard, block, now);
        }
        Ok(())
    }

    /// Close and validate every window whose deadline has passed.
    pub fn flush_shard(&mut self, shard: ShardId, now: SimTime) -> Vec<BlockOutcome> {
        let mut outcomes = Vec::new();
        while let Some(block) = self.shards[shard].orderer.flush_due(now) {
            outcomes.push(self.process_block(shard, block, now));
        }
        outcomes
    }

    /// Force-close the open window regardless of its deadline (drain path).
    pub fn force_flush(&mut self, shard: ShardId, now: SimTime) -> Option<BlockOutcome> {
        let block = self.shards[shard].orderer.flush(now)?;
        Some(self.process_block(shard, block, now))
    }

    /// Next block-formation deadline on a shard, if any window is open.
    pub fn next_deadline(&self, shard: ShardId) -> Option<SimTime> {
        self.shards[shard].orderer.deadline()
    }

    fn process_block(&mut self, shard: ShardId, block: Block, now: SimTime) -> BlockOutcome {
        let verdicts = self.shards[shard].state.validate_and_commit(&block);
        let mut outcome = BlockOutcome {
            shard,
            height: block.height,
            committed: 0,
            conflicted: 0,
            cap_due: Vec::new(),
        };
        for (tx, verdict) in block.txs.iter().zip(&verdicts) {
            let Some(uid) = self.shards[shard].inflight.remove(&tx.id.0) else {
                continue;
            };
            match verdict {
                Verdict::Valid => {
                    outcome.committed += 1;
                    if let Some(g) = self.on_debit_committed(uid, now) {
                        if !outcome.cap_due.contains(&g) {
                            outcome.cap_due.push(g);
                        }
                    }
                }
                Verdict::MvccConflict => {
                    outcome.conflicted += 1;
                    self.mvcc_conflicts += 1;
                    if self.txs[uid as usize].status.is_terminal() {
                        // Rolled back while waiting in the orderer; the
                        // debit never landed, so only the reservation goes.
                        let initiator = self.txs[uid as usize].initiator.clone();
                        self.retire_flight_out(&initiator, uid);
                        self.unpark_for(&initiator, now);
                        continue;
                    }
                    let attempts = self.txs[uid as usize].debit_attempts;
                    if attempts > self.cfg.max_debit_retries {
                        let _ = self.rollback(uid, now);
                    } else {
                        self.debit_retries += 1;
                        // Re-simulate against the freshly advanced state and
                        // queue for the next window.
                        if self.simulate_and_offer(uid, now).is_err() {
                            let _ = self.rollback(uid, now);
                        }
                    }
                }
            }
        }
        outcome
    }

    /// The escrow debit is now ledger fact: the transfer is POOLED and its
    /// value counts toward the shard escrow and the receiver's unsettled
    /// inbound credits. Returns the intermediary if its pool crossed the
    /// size cap.
    fn on_debit_committed(&mut self, uid: TxUid, now: SimTime) -> Option<PartyId> {
        let tx = self.txs[uid as usize].clone();
        if tx.status == CstxStatus::RolledBack {
            // Rolled back while the debit sat in the orderer: reverse the
            // just-committed escrow immediately.
            self.reverse_escrow_entry(&tx);
            self.retire_flight_out(&tx.initiator, uid);
            self.unpark_for(&tx.initiator, now);
            return None;
        }
        if !self.intermediaries[&tx.intermediary].live {
            self.reverse_escrow_entry(&tx);
            self.transition(uid, CstxStatus::RolledBack, now);
            self.retire_flight_out(&tx.initiator, uid);
            self.unpark_for(&tx.initiator, now);
            return None;
        }
        self.retire_flight_out(&tx.initiator, uid);
        self.pool
            .insert(tx.composite_key.clone(), PoolSlot::Raw { uid });
        self.flights
            .entry(tx.receiver.clone())
            .or_default()
            .pending_in
            .push(uid);
        self.shards[tx.source_shard].escrow += tx.amount;
        self.transition(uid, CstxStatus::Pooled, now);
        (self.pool_len(&tx.intermediary) >= self.cfg.pool_cap).then(|| tx.intermediary.clone())
    }

    /// Undo a committed escrow debit with system writes (refund + tombstone).
    fn reverse_escrow_entry(&mut self, tx: &CrossShardTx) {
        let shard = &mut self.shards[tx.source_shard];
        let key = Self::account_key(&tx.initiator);
        let restored = shard.state.balance_of(&key).expect("initiator is a balance") + tx.amount;
        shard.state.apply_system_writes(&[
            (tx.composite_key.clone(), None),
            (key, Some(restored.to_canonical_string())),
        ]);
    }

    fn retire_flight_out(&mut self, account: &str, uid: TxUid) {
        if let Some(f) = self.flights.get_mut(account) {
            f.pending_out.retain(|u| *u != uid);
        }
    }

    pub(crate) fn retire_flight_in(&mut self, account: &str, uid: TxUid) {
        if let Some(f) = self.flights.get_mut(account) {
            f.pending_in.retain(|u| *u != uid);
        }
    }

    /// Re-examine parked transfers of `account` after its balance moved.
    pub(crate) fn unpark_for(&mut self, account: &str, now: SimTime) {
        let Some(waiting) = self.parked.remove(account) else {
            return;
        };
        for uid in waiting {
            let tx = self.txs[uid as usize].clone();
            if tx.status != CstxStatus::Initiated {
                continue;
            }
            let base = self.admission_base(account, Some(uid)).unwrap_or(Amount::ZERO);
            if base >= tx.amount {
                let _ = self.simulate_and_offer(uid, now);
                continue;
            }
            let surviving: Amount = tx
                .deps
                .iter()
                .filter(|d| {
                    matches!(
                        self.txs[**d as usize].status,
                        CstxStatus::Pooled | CstxStatus::Accumulated
                    )
                })
                .map(|d| {
                    self.txs[*d as usize]
                        .amount
                        .mul_rate(self.cfg.rate)
                        .expect("bounded amounts")
                })
                .sum();
            if base + surviving < tx.amount {
                let _ = self.rollback(uid, now);
            } else {
                self.parked.entry(account.to_string()).or_default().push(uid);
            }
        }
    }

    /// Mark an intermediary dead and roll back everything it still holds.
    /// Transfers already completed stay completed; everything unsettled
    /// (pooled, parked, or in the ordering pipeline) rolls back so each
    /// submitted transfer still reaches a terminal status.
    pub fn fail_intermediary(&mut self, name: &str, now: SimTime) -> Result<Vec<TxUid>, EngineError> {
        let inter = self
            .intermediaries
            .get_mut(name)
            .ok_or_else(|| EngineError::UnknownIntermediary(name.to_string()))?;
        inter.live = false;
        let stranded: Vec<TxUid> = self
            .txs
            .iter()
            .filter(|t| t.intermediary == name && !t.status.is_terminal())
            .map(|t| t.uid)
            .collect();
        let mut rolled = Vec::new();
        for uid in stranded {
            if self.txs[uid as usize].status.is_terminal() {
                continue; // already swept by a cascade
            }
            rolled.extend(self.rollback(uid, now)?);
        }
        Ok(rolled)
    }

    /// Operator-level intra-shard transfer (liquidity top-ups in fault
    /// drills). Applied as system writes; conservation-neutral.
    pub fn system_transfer(
        &mut self,
        shard: ShardId,
        from: &str,
        to: &str,
        amount: Amount,
    ) -> Result<(), EngineError> {
        if !amount.is_positive() {
            return Err(EngineError::NegativeAmount);
        }
        let from_key = Self::account_key(from);
        let to_key = Self::account_key(to);
        let state = &mut self.shards[shard].state;
        let have = state
            .balance_of(&from_key)
            .map_err(|e| EngineError::Ledger(e.into()))?;
        if have < amount {
            return Err(EngineError::InsufficientBalance {
                account: from.to_string(),
                available: have,
                needed: amount,
            });
        }
        let to_bal = state
            .balance_of(&to_key)
            .map_err(|e| EngineError::Ledger(e.into()))?;
        state.apply_system_writes(&[
            (from_key, Some((have - amount).to_canonical_string())),
            (to_key, Some((to_bal + amount).to_canonical_string())),
        ]);
        Ok(())
    }

    pub(crate) fn transition(&mut self, uid: TxUid, next: CstxStatus, now: SimTime) {
        let tx = &mut self.txs[uid as usize];
        debug_assert!(
            tx.status.may_become(next),
            "illegal status transition {} -> {} for tx {uid}",
            tx.status,
            next
        );
        tx.status = next;
        if next.is_terminal() {
            tx.terminal_at = Some(now);
        }
    }

    pub fn tx(&self, uid: TxUid) -> Result<&CrossShardTx, EngineError> {
        self.txs
            .get(uid as usize)
            .ok_or(EngineError::UnknownTx(uid))
    }

    pub fn status(&self, uid: TxUid) -> Result<CstxStatus, EngineError> {
        Ok(self.tx(uid)?.status)
    }

    pub fn all_txs(&self) -> &[CrossShardTx] {
        &self.txs
    }

    pub fn all_terminal(&self) -> bool {
        self.txs.iter().all(|t| t.status.is_terminal())
    }

    /// (completed, rolled back) counts.
    pub fn terminal_counts(&self) -> (usize, usize) {
        let completed = self
            .txs
            .iter()
            .filter(|t| t.status == CstxStatus::Completed)
            .count();
        let rolled = self
            .txs
            .iter()
            .filter(|t| t.status == CstxStatus::RolledBack)
            .count();
        (completed, rolled)
    }

    fn account_shard(&self, name: &str) -> Result<ShardId, EngineError> {
        self.accounts
            .get(name)
            .map(|a| a.shard)
            .ok_or_else(|| EngineError::UnknownAccount(name.to_string()))
    }

    pub(crate) fn intermediary(&self, name: &str) -> Result<&Intermediary, EngineError> {
        self.intermediaries
            .get(name)
            .ok_or_else(|| EngineError::UnknownIntermediary(name.to_string()))
    }

    pub fn intermediary_names(&self) -> Vec<PartyId> {
        self.intermediaries.keys().cloned().collect()
    }

    /// Pool entries currently keyed under an intermediary (merged entries
    /// count once).
    pub fn pool_len(&self, intermediary: &str) -> usize {
        self.pool_keys(intermediary).count()
    }

    /// Transfers represented in the intermediary's pool.
    pub fn pool_members(&self, intermediary: &str) -> usize {
        self.pool_keys(intermediary)
            .map(|k| match &self.pool[k] {
                PoolSlot::Raw { .. } => 1,
                PoolSlot::Merged { members, .. } => members.len(),
            })
            .sum()
    }

    /// Total pooled entries and the bytes they pin: ledger key plus stored
    /// value, plus the in-flight payload cells of merged entries. A cheap,
    /// deterministic memory proxy.
    pub fn pool_footprint(&self) -> (u64, u64) {
        let mut entries = 0u64;
        let mut bytes = 0u64;
        for (key, slot) in &self.pool {
            entries += 1;
            bytes += key.len() as u64;
            let shard = match slot {
                PoolSlot::Raw { uid } => self.txs[*uid as usize].source_shard,
                PoolSlot::Merged { intermediary, payload, .. } => {
                    for cell in payload.values() {
                        bytes += cell.to_ledger_value().len() as u64;
                    }
                    self.intermediaries[intermediary].source_shard
                }
            };
            bytes += self.shards[shard]
                .state
                .value_of(key)
                .map_or(0, |v| v.len() as u64);
        }
        (entries, bytes)
    }

    fn pool_keys<'a>(&'a self, intermediary: &'a str) -> impl Iterator<Item = &'a String> + 'a {
        self.pool.iter().filter_map(move |(k, slot)| {
            let g = match slot {
                PoolSlot::Raw { uid } => &self.txs[*uid as usize].intermediary,
                PoolSlot::Merged { intermediary, .. } => intermediary,
            };
            (g == intermediary).then_some(k)
        })
    }

    pub(crate) fn pool_slots(&self) -> &BTreeMap<String, PoolSlot> {
        &self.pool
    }

    pub(crate) fn pool_slots_mut(&mut self) -> &mut BTreeMap<String, PoolSlot> {
        &mut self.pool
    }

    /// Apply reuse rewrites (tombstones and merged-entry installs) to one
    /// shard's state. Escrow totals are untouched: the rewrite only changes
    /// how the same escrowed value is keyed.
    pub(crate) fn rewrite_pool_entries(
        &mut self,
        shard: ShardId,
        writes: &[(String, Option<String>)],
    ) {
        self.shards[shard].state.apply_system_writes(writes);
    }

    pub(crate) fn record_reuse_audit(&mut self, audit: crate::reuse::ReuseAudit) {
        self.reuse_audits.push(audit);
    }

    pub fn reuse_audits(&self) -> &[crate::reuse::ReuseAudit] {
        &self.reuse_audits
    }

    /// Reuse audit trail as JSON lines.
    pub fn reuse_audit_jsonl(&self) -> String {
        self.reuse_audits
            .iter()
            .map(|a| serde_json::to_string(a).expect("audit serializes"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn shard_count(&self) -> usize {
        self.shards.len()
    }

    pub fn shard_state(&self, shard: ShardId) -> &VersionedWorldState {
        &self.shards[shard].state
    }

    /// Exact value parked in unsettled sub-broker entries on a shard.
    pub fn escrow_total(&self, shard: ShardId) -> Amount {
        self.shards[shard].escrow
    }

    /// Per-shard account balances plus escrow: constant across a run.
    pub fn conservation_totals(&self) -> Vec<Amount> {
        self.shards
            .iter()
            .map(|s| {
                let accounts: Amount = s
                    .state
                    .iter()
                    .filter(|(k, _)| k.starts_with("acct:"))
                    .filter_map(|(_, e)| e.value.as_ref())
                    .map(|v| v.parse::<Amount>().expect("balances are canonical"))
                    .sum();
                accounts + s.escrow
            })
            .collect()
    }

    pub fn store(&self) -> &Arc<KeyStore> {
        &self.store
    }

    pub fn backend(&self) -> &HeBackend {
        &self.backend
    }

    pub(crate) fn he_keyset(&self) -> &HeKeyset {
        &self.keyset
    }

    pub fn rate(&self) -> Rate {
        self.cfg.rate
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn audits(&self) -> &[SettlementAudit] {
        &self.audits
    }

    /// Settlement audit trail as JSON lines.
    pub fn audit_jsonl(&self) -> String {
        self.audits
            .iter()
            .map(|a| serde_json::to_string(a).expect("audit serializes"))
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn mvcc_conflicts(&self) -> u64 {
        self.mvcc_conflicts
    }

    pub fn debit_retries(&self) -> u64 {
        self.debit_retries
    }

    pub fn parked_len(&self) -> usize {
        self.parked.values().map(Vec::len).sum()
    }

    pub fn orderer_pending(&self, shard: ShardId) -> usize {
        self.shards[shard].orderer.pending_len()
    }
}
