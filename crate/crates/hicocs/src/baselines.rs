//! Reference cross-shard schemes the batched engine is measured against.
//!
//! All three move value through an intermediary funded on both shards, but
//! differ in how they survive contention on the intermediary's account key:
//!
//! * `Vanilla` writes the intermediary's single balance key on both legs and
//!   lets MVCC validation sort out the losers (retried up to a budget).
//! * `TwoPl` locks every touched key in one global order before writing, so
//!   conflicts never happen but throughput serializes on hot keys.
//! * `Occ` runs both legs optimistically in the same window and retries the
//!   whole transfer when either side validates dirty.
//!
//! Each scheme preserves per-shard conservation exactly and drives every
//! transfer to a terminal outcome; they trade off only success rate,
//! throughput, and latency.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::str::FromStr;

use crate::amount::{Amount, Rate};
use crate::clock::SimTime;
use crate::crypto::PartyId;
use crate::engine::{CrossShardEngine, EngineError, ShardId, TxUid};
use crate::ledger::{
    endorsement_byte_size, simulate_tx, Block, EndorsedTx, IntentError, LedgerError, Orderer,
    TxId, TxIntent, Verdict, VersionedWorldState,
};

/// Which reference coordinator processes the workload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineScheme {
    Vanilla,
    TwoPl,
    Occ,
}

impl std::fmt::Display for BaselineScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaselineScheme::Vanilla => "vanilla",
            BaselineScheme::TwoPl => "twopl",
            BaselineScheme::Occ => "occ",
        })
    }
}

impl FromStr for BaselineScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vanilla" => Ok(BaselineScheme::Vanilla),
            "twopl" | "2pl" => Ok(BaselineScheme::TwoPl),
            "occ" => Ok(BaselineScheme::Occ),
            other => Err(format!("unknown baseline scheme: {other}")),
        }
    }
}

/// Retry budget for aborted attempts. A transfer that still fails after
/// `max_retries` re-submissions is rolled back and counted against TSR.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// Wait before re-submitting; defaults to one block interval.
    pub backoff: SimTime,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 5,
            backoff: SimTime::from_millis(2_000),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineConfig {
    pub retry: RetryPolicy,
    /// How long a lock request may queue before the transaction aborts.
    pub lock_timeout: SimTime,
    /// One-way cross-shard message delay.
    pub net_delay: SimTime,
    /// Batch timeout of each shard's orderer, and the unit of lock holding.
    pub block_interval: SimTime,
    pub block_size_limit: u64,
    /// Source-to-target conversion rate, applied per transfer.
    pub rate: Rate,
    /// Run the wait-for-graph cycle detector on every lock enqueue. Costs
    /// time; meant for correctness audits of the lock order.
    pub wait_graph_checks: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            retry: RetryPolicy::default(),
            lock_timeout: SimTime::from_millis(4_000),
            net_delay: SimTime::from_millis(5),
            block_interval: SimTime::from_millis(2_000),
            block_size_limit: 40 * 1024 * 1024,
            rate: Rate::ONE,
            wait_graph_checks: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineOutcome {
    Completed,
    RolledBack,
}

impl std::fmt::Display for BaselineOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BaselineOutcome::Completed => "COMPLETED",
            BaselineOutcome::RolledBack => "ROLLED_BACK",
        })
    }
}

/// One transfer's journey through a baseline coordinator.
#[derive(Debug, Clone)]
pub struct BaselineTx {
    pub uid: TxUid,
    pub initiator: PartyId,
    pub receiver: PartyId,
    pub intermediary: PartyId,
    pub amount: Amount,
    pub submitted_at: SimTime,
    pub terminal_at: Option<SimTime>,
    pub outcome: Option<BaselineOutcome>,
    /// Re-submissions consumed (0 on a clean first pass).
    pub attempts: u32,
    /// MVCC losses this transfer ate across all attempts.
    pub conflicts: u32,
}

impl BaselineTx {
    pub fn is_terminal(&self) -> bool {
        self.outcome.is_some()
    }

    /// Initiation-to-terminal span on the simulated clock.
    pub fn latency(&self) -> Option<SimTime> {
        self.terminal_at.map(|t| t.saturating_sub(self.submitted_at))
    }
}

/// Aggregate counters for a completed run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BaselineReport {
    pub submitted: usize,
    pub completed: usize,
    pub rolled_back: usize,
    pub mvcc_conflicts: u64,
    pub lock_timeouts: u64,
    /// Re-submissions across all transfers.
    pub retries: u64,
    /// Wait-for cycles seen by the detector (always 0 under ordered locks).
    pub deadlock_cycles: u64,
    /// Instant the last transfer reached a terminal status.
    pub makespan: SimTime,
}

impl BaselineReport {
    pub fn tsr(&self) -> f64 {
        if self.submitted == 0 {
            return 100.0;
        }
        self.completed as f64 / self.submitted as f64 * 100.0
    }
}

/// Which half of a two-leg transfer an endorsed ledger tx carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Leg {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    /// (Re)start a transfer: vanilla leg 1, OCC both legs, 2PL acquisition.
    Start(TxUid),
    /// Vanilla only: begin the target-shard leg.
    SecondLeg(TxUid),
    /// Wake the shard's orderer at a window deadline.
    Flush(ShardId),
    /// 2PL: locks have been held across the cross-shard round trip; apply.
    Apply(TxUid),
    /// 2PL: a queued lock request has waited too long. The generation tag
    /// voids the event if the waiter was granted or aborted earlier.
    LockTimeout(TxUid, u32),
}

struct BaselineShard {
    state: VersionedWorldState,
    orderer: Orderer,
    /// Ledger tx id → (transfer, leg) for verdict routing.
    inflight: BTreeMap<u64, (TxUid, Leg)>,
}

/// Lock identity: one key on one shard. Ordered by (key, shard), the global
/// acquisition order that makes deadlock impossible.
type LockId = (String, ShardId);

#[derive(Debug, Default)]
struct LockCell {
    holder: Option<TxUid>,
    waiters: VecDeque<TxUid>,
}

#[derive(Debug, Default)]
struct TwoPlState {
    /// Locks this transfer needs, in global order.
    want: Vec<LockId>,
    /// How many of `want` are currently held.
    next: usize,
    /// Bumped whenever the waiter is granted or torn down.
    generation: u32,
    waiting_on: Option<LockId>,
}

#[derive(Debug, Default)]
struct OccPending {
    src: Option<Verdict>,
    dst: Option<Verdict>,
}

/// Event-driven runner for one baseline scheme over a two-or-more-shard
/// topology. Submit the whole workload, then [`run`](Self::run) drives every
/// transfer to a terminal status on the virtual clock.
pub struct BaselineEngine {
    scheme: BaselineScheme,
    cfg: BaselineConfig,
    shards: Vec<BaselineShard>,
    accounts: BTreeMap<PartyId, ShardId>,
    intermediaries: BTreeMap<PartyId, (ShardId, ShardId)>,
    txs: Vec<BaselineTx>,
    schedule: BinaryHeap<Reverse<(SimTime, u64, Ev)>>,
    seq: u64,
    next_ledger_tx: u64,
    flush_scheduled: Vec<Option<SimTime>>,
    locks: BTreeMap<LockId, LockCell>,
    twopl: BTreeMap<TxUid, TwoPlState>,
    occ: BTreeMap<TxUid, OccPending>,
    report: BaselineReport,
}

impl BaselineEngine {
    pub fn new(scheme: BaselineScheme, cfg: BaselineConfig, shard_count: usize) -> Self {
        assert!(shard_count >= 2, "cross-shard transfers need two shards");
        let shards = (0..shard_count)
            .map(|_| BaselineShard {
                state: VersionedWorldState::new(),
                orderer: Orderer::new(cfg.block_size_limit, cfg.block_interval),
                inflight: BTreeMap::new(),
            })
            .collect();
        BaselineEngine {
            scheme,
            shards,
            accounts: BTreeMap::new(),
            intermediaries: BTreeMap::new(),
            txs: Vec::new(),
            schedule: BinaryHeap::new(),
            seq: 0,
            next_ledger_tx: 0,
            flush_scheduled: vec![None; shard_count],
            locks: BTreeMap::new(),
            twopl: BTreeMap::new(),
            occ: BTreeMap::new(),
            report: BaselineReport::default(),
            cfg,
        }
    }

    pub fn scheme(&self) -> BaselineScheme {
        self.scheme
    }

    pub fn add_account(
        &mut self,
        name: &str,
        shard: ShardId,
        balance: Amount,
    ) -> Result<(), EngineError> {
        if self.accounts.contains_key(name) || self.intermediaries.contains_key(name) {
            return Err(EngineError::DuplicateKey(name.to_string()));
        }
        if balance.is_negative() {
            return Err(EngineError::NegativeAmount);
        }
        self.shards[shard]
            .state
            .seed_account(&CrossShardEngine::account_key(name), balance);
        self.accounts.insert(name.to_string(), shard);
        Ok(())
    }

    /// Register a broker funded on both shards. Unlike the batched engine
    /// there are no sub-broker keys: both legs hit its account keys directly.
    pub fn add_intermediary(
        &mut self,
        name: &str,
        source_shard: ShardId,
        target_shard: ShardId,
        source_funds: Amount,
        target_funds: Amount,
    ) -> Result<(), EngineError> {
        if self.accounts.contains_key(name) || self.intermediaries.contains_key(name) {
            return Err(EngineError::DuplicateKey(name.to_string()));
        }
        assert_ne!(source_shard, target_shard, "a bridge spans two shards");
        let key = CrossShardEngine::account_key(name);
        self.shards[source_shard].state.seed_account(&key, source_funds);
        self.shards[target_shard].state.seed_account(&key, target_funds);
        self.intermediaries
            .insert(name.to_string(), (source_shard, target_shard));
        Ok(())
    }

    /// Queue a transfer for the run. Route and sign checks mirror the
    /// batched engine so invalid input fails identically across schemes.
    pub fn submit(
        &mut self,
        from: &str,
        to: &str,
        intermediary: &str,
        amount: Amount,
        at: SimTime,
    ) -> Result<TxUid, EngineError> {
        if !amount.is_positive() {
            return Err(EngineError::NegativeAmount);
        }
        let (src, dst) = *self
            .intermediaries
            .get(intermediary)
            .ok_or_else(|| EngineError::UnknownIntermediary(intermediary.to_string()))?;
        for (name, expected) in [(from, src), (to, dst)] {
            let actual = *self
                .accounts
                .get(name)
                .ok_or_else(|| EngineError::UnknownAccount(name.to_string()))?;
            if actual != expected {
                return Err(EngineError::RouteMismatch {
                    account: name.to_string(),
                    expected,
                    actual,
                });
            }
        }
        let uid = self.txs.len() as TxUid;
        self.txs.push(BaselineTx {
            uid,
            initiator: from.to_string(),
            receiver: to.to_string(),
            intermediary: intermediary.to_string(),
            amount,
            submitted_at: at,
            terminal_at: None,
            outcome: None,
            attempts: 0,
            conflicts: 0,
        });
        self.report.submitted += 1;
        self.push(at, Ev::Start(uid));
        Ok(uid)
    }

    /// Drain the event queue; afterwards every submitted transfer is
    /// terminal. Returns the run's aggregate counters.
    pub fn run(&mut self) -> Result<BaselineReport, EngineError> {
        while let Some(Reverse((now, _, ev))) = self.schedule.pop() {
            // Overdue windows close before anything else observes `now`.
            self.flush_due_blocks(now)?;
            match ev {
                Ev::Start(uid) => self.start(uid, now)?,
                Ev::SecondLeg(uid) => self.vanilla_second_leg(uid, now)?,
                Ev::Flush(_) => {}
                Ev::Apply(uid) => self.twopl_apply(uid, now)?,
                Ev::LockTimeout(uid, generation) => self.twopl_timeout(uid, generation, now)?,
            }
        }
        debug_assert!(self.txs.iter().all(|t| t.is_terminal()));
        debug_assert!(self.shards.iter().all(|s| s.orderer.pending_len() == 0));
        Ok(self.report)
    }

    // ---- shared plumbing ----

    fn push(&mut self, at: SimTime, ev: Ev) {
        self.schedule.push(Reverse((at, self.seq, ev)));
        self.seq += 1;
    }

    fn finish(&mut self, uid: TxUid, outcome: BaselineOutcome, now: SimTime) {
        let tx = &mut self.txs[uid as usize];
        debug_assert!(tx.outcome.is_none(), "double terminal for {uid}");
        tx.outcome = Some(outcome);
        tx.terminal_at = Some(now);
        match outcome {
            BaselineOutcome::Completed => self.report.completed += 1,
            BaselineOutcome::RolledBack => self.report.rolled_back += 1,
        }
        self.report.makespan = self.report.makespan.max(now);
    }

    /// One more attempt if the budget allows, else roll back. The caller has
    /// already undone any partial effects.
    fn retry_or_abort(&mut self, uid: TxUid, now: SimTime) {
        self.txs[uid as usize].attempts += 1;
        if self.txs[uid as usize].attempts > self.cfg.retry.max_retries {
            self.finish(uid, BaselineOutcome::RolledBack, now);
        } else {
            self.report.retries += 1;
            self.push(now + self.cfg.retry.backoff, Ev::Start(uid));
        }
    }

    fn start(&mut self, uid: TxUid, now: SimTime) -> Result<(), EngineError> {
        match self.scheme {
            BaselineScheme::Vanilla => self.vanilla_first_leg(uid, now),
            BaselineScheme::Occ => self.occ_start(uid, now),
            BaselineScheme::TwoPl => self.twopl_start(uid, now),
        }
    }

    fn route(&self, uid: TxUid) -> (ShardId, ShardId) {
        self.intermediaries[&self.txs[uid as usize].intermediary]
    }

    fn in_amount(&self, uid: TxUid) -> Amount {
        self.txs[uid as usize]
            .amount
            .mul_rate(self.cfg.rate)
            .expect("bounded amounts")
    }

    fn offer_leg(
        &mut self,
        shard: ShardId,
        uid: TxUid,
        leg: Leg,
        rwset: crate::ledger::ReadWriteSet,
        now: SimTime,
    ) -> Result<(), EngineError> {
        let byte_size = endorsement_byte_size(&rwset);
        let id = TxId(self.next_ledger_tx);
        self.next_ledger_tx += 1;
        self.shards[shard].inflight.insert(id.0, (uid, leg));
        let endorsed = EndorsedTx {
            id,
            rwset,
            byte_size,
            submitted_at: now,
        };
        if let Some(block) = self.shards[shard].orderer.offer(endorsed, now) {
            self.commit_block(shard, &block, now)?;
        }
        self.ensure_flush_scheduled(shard);
        Ok(())
    }

    fn ensure_flush_scheduled(&mut self, shard: ShardId) {
        if let Some(deadline) = self.shards[shard].orderer.deadline() {
            if self.flush_scheduled[shard] != Some(deadline) {
                self.flush_scheduled[shard] = Some(deadline);
                self.push(deadline, Ev::Flush(shard));
            }
        }
    }

    fn flush_due_blocks(&mut self, now: SimTime) -> Result<(), EngineError> {
        for shard in 0..self.shards.len() {
            while let Some(block) = self.shards[shard].orderer.flush_due(now) {
                self.flush_scheduled[shard] = None;
                self.commit_block(shard, &block, block.closed_at)?;
            }
        }
        Ok(())
    }

    fn commit_block(
        &mut self,
        shard: ShardId,
        block: &Block,
        now: SimTime,
    ) -> Result<(), EngineError> {
        let verdicts = self.shards[shard].state.validate_and_commit(block);
        for (endorsed, verdict) in block.txs.iter().zip(verdicts) {
            let (uid, leg) = self.shards[shard]
                .inflight
                .remove(&endorsed.id.0)
                .expect("verdict for unknown ledger tx");
            match self.scheme {
                BaselineScheme::Vanilla => self.vanilla_verdict(uid, leg, verdict, now)?,
                BaselineScheme::Occ => self.occ_verdict(uid, leg, verdict, now)?,
                BaselineScheme::TwoPl => unreachable!("2PL bypasses the orderer"),
            }
        }
        Ok(())
    }

    /// Undo a committed leg with system writes (the coordinator's abort).
    /// `from` and `to` are the original transfer's direction.
    fn reverse_transfer(&mut self, shard: ShardId, from: &str, to: &str, amount: Amount) {
        let state = &mut self.shards[shard].state;
        let from_bal = state.balance_of(from).expect("reversing a committed leg");
        let to_bal = state.balance_of(to).expect("reversing a committed leg");
        state.apply_system_writes(&[
            (from.to_string(), Some((from_bal + amount).to_canonical_string())),
            (to.to_string(), Some((to_bal - amount).to_canonical_string())),
        ]);
    }

    // ---- vanilla: sequential legs over the broker's single account key ----

    fn vanilla_first_leg(&mut self, uid: TxUid, now: SimTime) -> Result<(), EngineError> {
        let (src, _) = self.route(uid);
        let tx = &self.txs[uid as usize];
        let intent = TxIntent::Transfer {
            from: CrossShardEngine::account_key(&tx.initiator),
            to: CrossShardEngine::account_key(&tx.intermediary),
            amount: tx.amount,
        };
        match simulate_tx(&intent, &self.shards[src].state) {
            Ok(rwset) => self.offer_leg(src, uid, Leg::Source, rwset, now),
            Err(LedgerError::IntentFailed(IntentError::InsufficientBalance { .. })) => {
                self.finish(uid, BaselineOutcome::RolledBack, now);
                Ok(())
            }
            Err(e) => Err(e.into()),
        }
    }

    fn vanilla_second_leg(&mut self, uid: TxUid, now: SimTime) -> Result<(), EngineError> {
        let (_, dst) = self.route(uid);
        let tx = &self.txs[uid as usize];
        let intent = TxIntent::Transfer {
            from: CrossShardEngine::account_key(&tx.intermediary),
            to: CrossShardEngine::account_key(&tx.receiver),
            amount: self.in_amount(uid),
        };
        match simulate_tx(&intent, &self.shards[dst].state) {
            Ok(rwset) => self.offer_leg(dst, uid, Leg::Target, rwset, now),
            Err(LedgerError::IntentFailed(IntentError::InsufficientBalance { .. })) => {
                // The broker cannot cover the payout; give the sender back
                // the already-committed first leg.
                self.compensate_first_leg(uid);
                self.finish(uid, BaselineOutcome::RolledBack, now);
                Ok(())
            }
            Err(e) => Err(e.into()),
        }
    }

    fn compensate_first_leg(&mut self, uid: TxUid) {
        let (src, _) = self.route(uid);
        let tx = &self.txs[uid as usize];
        let initiator = CrossShardEngine::account_key(&tx.initiator);
        let broker = CrossShardEngine::account_key(&tx.intermediary);
        let amount = tx.amount;
        self.reverse_transfer(src, &initiator, &broker, amount);
    }

    fn vanilla_verdict(
        &mut self,
        uid: TxUid,
        leg: Leg,
        verdict: Verdict,
        now: SimTime,
    ) -> Result<(), EngineError> {
        match (leg, verdict) {
            (Leg::Source, Verdict::Valid) => {
                self.push(now + self.cfg.net_delay, Ev::SecondLeg(uid));
            }
            (Leg::Target, Verdict::Valid) => {
                self.finish(uid, BaselineOutcome::Completed, now);
            }
            (leg, Verdict::MvccConflict) => {
                self.txs[uid as usize].conflicts += 1;
                self.report.mvcc_conflicts += 1;
                let tx = &self.txs[uid as usize];
                if tx.attempts >= self.cfg.retry.max_retries {
                    if leg == Leg::Target {
                        self.compensate_first_leg(uid);
                    }
                    self.txs[uid as usize].attempts += 1;
                    self.finish(uid, BaselineOutcome::RolledBack, now);
                } else {
                    self.txs[uid as usize].attempts += 1;
                    self.report.retries += 1;
                    let ev = match leg {
                        Leg::Source => Ev::Start(uid),
                        Leg::Target => Ev::SecondLeg(uid),
                    };
                    self.push(now + self.cfg.retry.backoff, ev);
                }
            }
        }
        Ok(())
    }

    // ---- OCC: both legs race in the same window, whole-tx retry ----

    fn occ_start(&mut self, uid: TxUid, now: SimTime) -> Result<(), EngineError> {
        let (src, dst) = self.route(uid);
        let tx = &self.txs[uid as usize];
        let leg1 = TxIntent::Transfer {
            from: CrossShardEngine::account_key(&tx.initiator),
            to: CrossShardEngine::account_key(&tx.intermediary),
            amount: tx.amount,
        };
        let leg2 = TxIntent::Transfer {
            from: CrossShardEngine::account_key(&tx.intermediary),
            to: CrossShardEngine::account_key(&tx.receiver),
            amount: self.in_amount(uid),
        };
        let rw1 = match simulate_tx(&leg1, &self.shards[src].state) {
            Ok(rw) => rw,
            Err(LedgerError::IntentFailed(IntentError::InsufficientBalance { .. })) => {
                self.finish(uid, BaselineOutcome::RolledBack, now);
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        };
        let rw2 = match simulate_tx(&leg2, &self.shards[dst].state) {
            Ok(rw) => rw,
            Err(LedgerError::IntentFailed(IntentError::InsufficientBalance { .. })) => {
                self.finish(uid, BaselineOutcome::RolledBack, now);
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        };
        self.occ.insert(uid, OccPending::default());
        self.offer_leg(src, uid, Leg::Source, rw1, now)?;
        self.offer_leg(dst, uid, Leg::Target, rw2, now)
    }

    fn occ_verdict(
        &mut self,
        uid: TxUid,
        leg: Leg,
        verdict: Verdict,
        now: SimTime,
    ) -> Result<(), EngineError> {
        if verdict == Verdict::MvccConflict {
            self.txs[uid as usize].conflicts += 1;
            self.report.mvcc_conflicts += 1;
        }
        let pending = self.occ.get_mut(&uid).expect("verdict for unknown OCC tx");
        match leg {
            Leg::Source => pending.src = Some(verdict),
            Leg::Target => pending.dst = Some(verdict),
        }
        let (Some(src_v), Some(dst_v)) = (pending.src, pending.dst) else {
            return Ok(());
        };
        self.occ.remove(&uid);
        match (src_v, dst_v) {
            (Verdict::Valid, Verdict::Valid) => {
                self.finish(uid, BaselineOutcome::Completed, now);
            }
            (src_v, dst_v) => {
                // Whichever side committed is reversed, then the whole
                // transfer retries from fresh snapshots.
                let (src, dst) = self.route(uid);
                let tx = self.txs[uid as usize].clone();
                if src_v == Verdict::Valid {
                    let initiator = CrossShardEngine::account_key(&tx.initiator);
                    let broker = CrossShardEngine::account_key(&tx.intermediary);
                    self.reverse_transfer(src, &initiator, &broker, tx.amount);
                }
                if dst_v == Verdict::Valid {
                    let broker = CrossShardEngine::account_key(&tx.intermediary);
                    let receiver = CrossShardEngine::account_key(&tx.receiver);
                    let in_amount = self.in_amount(uid);
                    self.reverse_transfer(dst, &broker, &receiver, in_amount);
                }
                self.retry_or_abort(uid, now);
            }
        }
        Ok(())
    }

    // ---- 2PL: ordered lock acquisition, apply under locks ----

    fn lock_order(&self, uid: TxUid) -> Vec<LockId> {
        let (src, dst) = self.route(uid);
        let tx = &self.txs[uid as usize];
        let mut want = vec![
            (CrossShardEngine::account_key(&tx.initiator), src),
            (CrossShardEngine::account_key(&tx.intermediary), src),
            (CrossShardEngine::account_key(&tx.intermediary), dst),
            (CrossShardEngine::account_key(&tx.receiver), dst),
        ];
        want.sort();
        want.dedup();
        want
    }

    fn twopl_start(&mut self, uid: TxUid, now: SimTime) -> Result<(), EngineError> {
        let want = self.lock_order(uid);
        let entry = self.twopl.entry(uid).or_default();
        entry.want = want;
        entry.next = 0;
        entry.waiting_on = None;
        self.twopl_acquire(uid, now);
        Ok(())
    }

    /// Take locks in order until blocked or done. Blocking enqueues FIFO and
    /// arms a timeout; finishing schedules the apply after the cross-shard
    /// round trip the locks must straddle.
    fn twopl_acquire(&mut self, uid: TxUid, now: SimTime) {
        loop {
            let state = self.twopl.get_mut(&uid).expect("acquire without state");
            let Some(lock) = state.want.get(state.next).cloned() else {
                let hold = self.hold_time();
                self.push(now + hold, Ev::Apply(uid));
                return;
            };
            let cell = self.locks.entry(lock.clone()).or_default();
            match cell.holder {
                None => {
                    cell.holder = Some(uid);
                    state.next += 1;
                }
                Some(_) => {
                    cell.waiters.push_back(uid);
                    state.waiting_on = Some(lock);
                    let generation = state.generation;
                    self.push(now + self.cfg.lock_timeout, Ev::LockTimeout(uid, generation));
                    if self.cfg.wait_graph_checks && self.wait_cycle_from(uid) {
                        self.report.deadlock_cycles += 1;
                    }
                    return;
                }
            }
        }
    }

    /// Two block commits plus the message each way: what a lock must span
    /// when prepare and commit anchor in consecutive blocks on both shards.
    fn hold_time(&self) -> SimTime {
        self.cfg.block_interval + self.cfg.block_interval + self.cfg.net_delay + self.cfg.net_delay
    }

    fn twopl_apply(&mut self, uid: TxUid, now: SimTime) -> Result<(), EngineError> {
        let (src, dst) = self.route(uid);
        let tx = self.txs[uid as usize].clone();
        let in_amount = self.in_amount(uid);
        let initiator = CrossShardEngine::account_key(&tx.initiator);
        let broker = CrossShardEngine::account_key(&tx.intermediary);
        let receiver = CrossShardEngine::account_key(&tx.receiver);
        let o_bal = self.shards[src].state.balance_of(&initiator).map_err(LedgerError::from)?;
        let g_dst_bal = self.shards[dst].state.balance_of(&broker).map_err(LedgerError::from)?;
        if o_bal >= tx.amount && g_dst_bal >= in_amount {
            let g_src_bal = self.shards[src].state.balance_of(&broker).map_err(LedgerError::from)?;
            let d_bal = self.shards[dst].state.balance_of(&receiver).map_err(LedgerError::from)?;
            self.shards[src].state.apply_system_writes(&[
                (initiator.clone(), Some((o_bal - tx.amount).to_canonical_string())),
                (broker.clone(), Some((g_src_bal + tx.amount).to_canonical_string())),
            ]);
            self.shards[dst].state.apply_system_writes(&[
                (broker.clone(), Some((g_dst_bal - in_amount).to_canonical_string())),
                (receiver.clone(), Some((d_bal + in_amount).to_canonical_string())),
            ]);
            self.finish(uid, BaselineOutcome::Completed, now);
        } else {
            // Reads under locks are authoritative: the balance is simply
            // not there, so retrying cannot help.
            self.finish(uid, BaselineOutcome::RolledBack, now);
        }
        self.release_all(uid, now);
        Ok(())
    }

    fn twopl_timeout(
        &mut self,
        uid: TxUid,
        generation: u32,
        now: SimTime,
    ) -> Result<(), EngineError> {
        let Some(state) = self.twopl.get_mut(&uid) else {
            return Ok(());
        };
        if state.generation != generation {
            return Ok(()); // granted or torn down since; stale alarm
        }
        let Some(lock) = state.waiting_on.take() else {
            return Ok(());
        };
        state.generation += 1;
        self.report.lock_timeouts += 1;
        let cell = self.locks.get_mut(&lock).expect("waited-on lock exists");
        cell.waiters.retain(|w| *w != uid);
        self.release_all(uid, now);
        self.retry_or_abort(uid, now);
        Ok(())
    }

    /// Drop every held lock and hand each to its next FIFO waiter, resuming
    /// those waiters' acquisition runs.
    fn release_all(&mut self, uid: TxUid, now: SimTime) {
        let state = self.twopl.remove(&uid).expect("release without state");
        let mut granted = Vec::new();
        for lock in &state.want[..state.next] {
            let cell = self.locks.get_mut(lock).expect("held lock exists");
            debug_assert_eq!(cell.holder, Some(uid));
            cell.holder = cell.waiters.pop_front();
            if let Some(next_holder) = cell.holder {
                granted.push((lock.clone(), next_holder));
            }
        }
        for (lock, next_holder) in granted {
            let ns = self
                .twopl
                .get_mut(&next_holder)
                .expect("waiter state exists");
            debug_assert_eq!(ns.waiting_on.as_ref(), Some(&lock));
            ns.waiting_on = None;
            ns.generation += 1;
            ns.next += 1;
            self.twopl_acquire(next_holder, now);
        }
    }

    /// Walk waiter → holder edges from `uid`; true if the walk returns to
    /// `uid` (a deadlock cycle). Under global lock ordering it never does.
    fn wait_cycle_from(&self, uid: TxUid) -> bool {
        let mut cur = uid;
        for _ in 0..=self.txs.len() {
            let Some(lock) = self.twopl.get(&cur).and_then(|s| s.waiting_on.as_ref()) else {
                return false;
            };
            let Some(holder) = self.locks.get(lock).and_then(|c| c.holder) else {
                return false;
            };
            if holder == uid {
                return true;
            }
            cur = holder;
        }
        false
    }

    // ---- accessors ----

    pub fn records(&self) -> &[BaselineTx] {
        &self.txs
    }

    pub fn tx(&self, uid: TxUid) -> Result<&BaselineTx, EngineError> {
        self.txs
            .get(uid as usize)
            .ok_or(EngineError::UnknownTx(uid))
    }

    pub fn report(&self) -> BaselineReport {
        self.report
    }

    pub fn shard_count(&self) -> usize {
        self.shards.len()
    }

    pub fn shard_state(&self, shard: ShardId) -> &VersionedWorldState {
        &self.shards[shard].state
    }

    /// Per-shard sums over account balances. Every scheme keeps each shard's
    /// total constant: both legs and all compensations are intra-shard.
    pub fn conservation_totals(&self) -> Vec<Amount> {
        self.shards
            .iter()
            .map(|s| {
                s.state
                    .iter()
                    .filter(|(k, _)| k.starts_with("acct:"))
                    .map(|(k, _)| s.state.balance_of(k).expect("accounts hold balances"))
                    .sum()
            })
            .collect()
    }
}
