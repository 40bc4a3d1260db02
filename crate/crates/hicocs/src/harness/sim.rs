//! Scheme runners: drive one workload to completion on the simulated clock.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::baselines::{BaselineEngine, BaselineOutcome};
use crate::clock::SimTime;
use crate::engine::{CrossShardEngine, CstxStatus, EngineError, ShardId};
use crate::reuse::run_reuse_epoch;

use super::config::{ExperimentConfig, Scheme};
use super::workload::{build_topology, WorkloadTx};
use super::HarnessError;

/// Per-transfer outcome, scheme-independent.
#[derive(Debug, Clone, Copy)]
pub struct TxRecord {
    pub submitted_at: SimTime,
    pub terminal_at: SimTime,
    pub completed: bool,
}

impl TxRecord {
    pub fn latency(&self) -> SimTime {
        self.terminal_at.saturating_sub(self.submitted_at)
    }
}

/// Everything a run produces before metric aggregation.
#[derive(Debug, Clone, Default)]
pub struct SchemeRun {
    pub records: Vec<TxRecord>,
    pub mvcc_conflicts: u64,
    pub retries: u64,
    pub lock_timeouts: u64,
    /// (sim ms, pooled entries) sampled before each settlement tick.
    pub pool_series: Vec<(u64, u64)>,
    /// (sim ms, ledger entries scanned by that tick's pool queries).
    pub query_series: Vec<(u64, u64)>,
    pub entries_scanned: u64,
    pub pool_peak_entries: u64,
    pub pool_peak_bytes: u64,
    pub makespan: SimTime,
}

pub fn run_scheme(
    cfg: &ExperimentConfig,
    scheme: Scheme,
    load: &[WorkloadTx],
) -> Result<SchemeRun, HarnessError> {
    match scheme.as_baseline() {
        None => run_hicocs(cfg, load),
        Some(baseline) => run_baseline(cfg, baseline, load),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Arrive(usize),
    Flush(ShardId),
    SettleTick(u64),
}

fn run_hicocs(cfg: &ExperimentConfig, load: &[WorkloadTx]) -> Result<SchemeRun, HarnessError> {
    let topo = build_topology(cfg);
    let mut engine = CrossShardEngine::new(cfg.engine_config(), cfg.shards);
    for (name, src, dst, funds) in &topo.intermediaries {
        engine.add_intermediary(name, *src, *dst, *funds, *funds)?;
    }
    for (name, shard, funds) in &topo.senders {
        engine.add_account(name, *shard, *funds)?;
    }
    for (name, shard) in &topo.receivers {
        engine.add_account(name, *shard, crate::amount::Amount::ZERO)?;
    }
    let group = engine.intermediary_names();
    let t_settle = SimTime::from_millis(cfg.t_settle_ms);

    let mut heap: BinaryHeap<Reverse<(SimTime, u64, Ev)>> = BinaryHeap::new();
    let mut seq = 0u64;
    for (i, tx) in load.iter().enumerate() {
        push_ev(&mut heap, &mut seq, tx.at, Ev::Arrive(i));
    }
    push_ev(&mut heap, &mut seq, t_settle, Ev::SettleTick(1));

    let mut run = SchemeRun::default();
    let mut flush_scheduled: Vec<Option<SimTime>> = vec![None; cfg.shards];
    let mut arrived = 0usize;
    let mut scanned_last = 0u64;
    // Hard stop: ten thousand settle ticks past the arrival horizon means
    // something cannot terminate.
    let horizon_ms = (load.len() as u64 / cfg.concurrent_clients as u64 + 2) * cfg.batch_timeout_ms;
    let tick_limit = horizon_ms / cfg.t_settle_ms + 10_000;

    while let Some(Reverse((now, _, ev))) = heap.pop() {
        // Close every due batch window before the event observes `now`: an
        // arrival must never be offered into a window that already expired.
        flush_due(&mut engine, now)?;
        match ev {
            Ev::Arrive(i) => {
                arrived += 1;
                let tx = &load[i];
                let uid = engine.initiate_cstx(&tx.from, &tx.to, &tx.intermediary, tx.amount, now)?;
                debug_assert_eq!(uid as usize, i, "arrival order defines uids");
                match engine.preprocess(uid, now) {
                    Ok(_) => {}
                    // The engine already rolled the transfer back.
                    Err(EngineError::InsufficientBalance { .. }) => {}
                    Err(e) => return Err(e.into()),
                }
            }
            // Wake-up only; the pre-dispatch sweep closed the window.
            Ev::Flush(shard) => flush_scheduled[shard] = None,
            Ev::SettleTick(n) => {
                let (entries, bytes) = engine.pool_footprint();
                run.pool_peak_entries = run.pool_peak_entries.max(entries);
                run.pool_peak_bytes = run.pool_peak_bytes.max(bytes);
                run.pool_series.push((now.as_millis(), entries));
                for g in &group {
                    engine.settle(g, now)?;
                }
                if cfg.reuse_every_k > 0 && n % cfg.reuse_every_k == 0 {
                    let epoch = n / cfg.reuse_every_k;
                    run_reuse_epoch(&mut engine, &group, epoch, cfg.rng_seed, now)?;
                }
                let scanned_now = total_scanned(&engine);
                run.query_series.push((now.as_millis(), scanned_now - scanned_last));
                scanned_last = scanned_now;
                let done = arrived == load.len() && engine.all_terminal();
                if !done {
                    if n > tick_limit {
                        return Err(HarnessError::Stalled(format!(
                            "transfers still open after {n} settlement ticks"
                        )));
                    }
                    push_ev(&mut heap, &mut seq, now + t_settle, Ev::SettleTick(n + 1));
                }
            }
        }
        for shard in 0..cfg.shards {
            ensure_flush(&engine, &mut flush_scheduled, &mut heap, &mut seq, shard);
        }
    }

    if !engine.all_terminal() {
        return Err(HarnessError::Stalled(
            "event queue drained with open transfers".into(),
        ));
    }
    run.records = engine
        .all_txs()
        .iter()
        .map(|tx| TxRecord {
            submitted_at: tx.initiated_at,
            terminal_at: tx.terminal_at.expect("all terminal"),
            completed: tx.status == CstxStatus::Completed,
        })
        .collect();
    run.makespan = run
        .records
        .iter()
        .map(|r| r.terminal_at)
        .max()
        .unwrap_or(SimTime::ZERO);
    run.mvcc_conflicts = engine.mvcc_conflicts();
    run.retries = engine.debit_retries();
    run.entries_scanned = total_scanned(&engine);
    Ok(run)
}

fn push_ev(
    heap: &mut BinaryHeap<Reverse<(SimTime, u64, Ev)>>,
    seq: &mut u64,
    at: SimTime,
    ev: Ev,
) {
    heap.push(Reverse((at, *seq, ev)));
    *seq += 1;
}

/// Commit every batch window whose deadline has passed, settling any
/// intermediary whose pending pool hit the batching cap.
fn flush_due(engine: &mut CrossShardEngine, now: SimTime) -> Result<(), HarnessError> {
    for shard in 0..engine.shard_count() {
        if engine.next_deadline(shard).is_some_and(|d| d <= now) {
            for outcome in engine.flush_shard(shard, now) {
                for g in outcome.cap_due {
                    engine.settle(&g, now)?;
                }
            }
        }
    }
    Ok(())
}

fn total_scanned(engine: &CrossShardEngine) -> u64 {
    (0..engine.shard_count())
        .map(|s| engine.shard_state(s).stats().entries_scanned)
        .sum()
}

fn ensure_flush(
    engine: &CrossShardEngine,
    scheduled: &mut [Option<SimTime>],
    heap: &mut BinaryHeap<Reverse<(SimTime, u64, Ev)>>,
    seq: &mut u64,
    shard: ShardId,
) {
    if let Some(deadline) = engine.next_deadline(shard) {
        if scheduled[shard] != Some(deadline) {
            scheduled[shard] = Some(deadline);
            heap.push(Reverse((deadline, *seq, Ev::Flush(shard))));
            *seq += 1;
        }
    }
}

fn run_baseline(
    cfg: &ExperimentConfig,
    scheme: crate::baselines::BaselineScheme,
    load: &[WorkloadTx],
) -> Result<SchemeRun, HarnessError> {
    let topo = build_topology(cfg);
    let mut engine = BaselineEngine::new(scheme, cfg.baseline_config(), cfg.shards);
    for (name, src, dst, funds) in &topo.intermediaries {
        engine.add_intermediary(name, *src, *dst, *funds, *funds)?;
    }
    for (name, shard, funds) in &topo.senders {
        engine.add_account(name, *shard, *funds)?;
    }
    for (name, shard) in &topo.receivers {
        engine.add_account(name, *shard, crate::amount::Amount::ZERO)?;
    }
    for tx in load {
        engine.submit(&tx.from, &tx.to, &tx.intermediary, tx.amount, tx.at)?;
    }
    let report = engine.run()?;
    let records = engine
        .records()
        .iter()
        .map(|tx| TxRecord {
            submitted_at: tx.submitted_at,
            terminal_at: tx.terminal_at.expect("run drives all terminal"),
            completed: tx.outcome == Some(BaselineOutcome::Completed),
        })
        .collect();
    Ok(SchemeRun {
        records,
        mvcc_conflicts: report.mvcc_conflicts,
        retries: report.retries,
        lock_timeouts: report.lock_timeouts,
        pool_series: Vec::new(),
        query_series: Vec::new(),
        entries_scanned: 0,
        pool_peak_entries: 0,
        pool_peak_bytes: 0,
        makespan: report.makespan,
    })
}
