//! Aggregate a finished run into the reported figures.

use serde::Serialize;

use super::config::{ExperimentConfig, Scheme};
use super::sim::SchemeRun;

/// Share of transfers that must warm the system before latency counts.
const WARMUP_SHARE: f64 = 0.05;

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct CpuMemProxy {
    /// Ledger entries walked by pool queries over the whole run.
    pub entries_scanned: u64,
    /// Largest pending-pool entry count observed at a settlement tick.
    pub peak_pool_entries: u64,
    /// Largest pending-pool byte footprint observed at a settlement tick.
    pub peak_pool_bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub scheme: Scheme,
    pub skewness: f64,
    pub block_size_mb: u64,
    pub tx_count: u64,
    /// Success rate in percent: completed / submitted * 100.
    pub tsr: f64,
    /// Completed transfers per simulated second.
    pub tps: f64,
    pub latency: LatencyStats,
    pub mvcc_conflicts: u64,
    pub retries: u64,
    pub lock_timeouts: u64,
    pub completed: u64,
    pub rolled_back: u64,
    /// (sim ms, pooled entries) sampled at each settlement tick.
    pub pool_size_series: Vec<(u64, u64)>,
    /// (sim ms, ledger entries scanned by that tick's queries).
    pub query_time_series: Vec<(u64, u64)>,
    pub cpu_mem_proxy: CpuMemProxy,
    pub seed: u64,
}

pub fn build_report(cfg: &ExperimentConfig, scheme: Scheme, run: &SchemeRun) -> MetricsReport {
    let submitted = run.records.len() as u64;
    let completed = run.records.iter().filter(|r| r.completed).count() as u64;
    let rolled_back = submitted - completed;
    let tsr = if submitted == 0 {
        0.0
    } else {
        completed as f64 / submitted as f64 * 100.0
    };
    let secs = run.makespan.as_millis() as f64 / 1000.0;
    let tps = if secs > 0.0 { completed as f64 / secs } else { 0.0 };

    // Records sit in submission order; the warm-up discard drops the first
    // slice from latency alone, never from tsr or tps.
    let warmup = (submitted as f64 * WARMUP_SHARE).floor() as usize;
    let mut lats: Vec<u64> = run
        .records
        .iter()
        .skip(warmup)
        .filter(|r| r.completed)
        .map(|r| r.latency().as_millis())
        .collect();
    lats.sort_unstable();
    let latency = latency_stats(&lats);

    MetricsReport {
        scheme,
        skewness: cfg.skewness,
        block_size_mb: cfg.block_size_mb,
        tx_count: cfg.tx_count as u64,
        tsr,
        tps,
        latency,
        mvcc_conflicts: run.mvcc_conflicts,
        retries: run.retries,
        lock_timeouts: run.lock_timeouts,
        completed,
        rolled_back,
        pool_size_series: run.pool_series.clone(),
        query_time_series: run.query_series.clone(),
        cpu_mem_proxy: CpuMemProxy {
            entries_scanned: run.entries_scanned,
            peak_pool_entries: run.pool_peak_entries,
            peak_pool_bytes: run.pool_peak_bytes,
        },
        seed: cfg.rng_seed,
    }
}

fn latency_stats(sorted_ms: &[u64]) -> LatencyStats {
    if sorted_ms.is_empty() {
        return LatencyStats::default();
    }
    let n = sorted_ms.len();
    let mean = sorted_ms.iter().sum::<u64>() as f64 / n as f64;
    LatencyStats {
        mean_ms: mean,
        p50_ms: nearest_rank(sorted_ms, 50.0),
        p99_ms: nearest_rank(sorted_ms, 99.0),
    }
}

/// Nearest-rank percentile over a sorted sample.
fn nearest_rank(sorted_ms: &[u64], pct: f64) -> f64 {
    let n = sorted_ms.len();
    let rank = ((pct / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    sorted_ms[rank - 1] as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SimTime;
    use crate::harness::sim::TxRecord;

    fn rec(submitted: u64, terminal: u64, completed: bool) -> TxRecord {
        TxRecord {
            submitted_at: SimTime::from_millis(submitted),
            terminal_at: SimTime::from_millis(terminal),
            completed,
        }
    }

    #[test]
    fn percentiles_use_the_nearest_rank() {
        let sample: Vec<u64> = (1..=100).collect();
        assert_eq!(nearest_rank(&sample, 50.0), 50.0);
        assert_eq!(nearest_rank(&sample, 99.0), 99.0);
        assert_eq!(nearest_rank(&[7], 99.0), 7.0);
        assert_eq!(nearest_rank(&[3, 9], 50.0), 3.0);
    }

    #[test]
    fn report_counts_rates_and_latency() {
        let cfg = ExperimentConfig {
            tx_count: 4,
            ..ExperimentConfig::default()
        };
        let run = SchemeRun {
            records: vec![
                rec(0, 100, true),
                rec(10, 210, true),
                rec(20, 220, false),
                rec(30, 330, true),
            ],
            makespan: SimTime::from_millis(330),
            ..SchemeRun::default()
        };
        let report = build_report(&cfg, Scheme::Hicocs, &run);
        assert_eq!(report.completed, 3);
        assert_eq!(report.rolled_back, 1);
        assert_eq!(report.tsr, 75.0);
        assert!((report.tps - 3.0 / 0.330).abs() < 1e-9);
        // Latencies of the completed: 100, 200, 300 (4 txs: no warm-up cut).
        assert_eq!(report.latency.mean_ms, 200.0);
        assert_eq!(report.latency.p50_ms, 200.0);
        assert_eq!(report.latency.p99_ms, 300.0);
    }

    #[test]
    fn warm_up_drops_the_head_from_latency_but_not_from_tsr() {
        // 40 records: the first two (5%) fall out of the latency sample.
        let mut records = vec![rec(0, 100_000, true), rec(0, 100_000, true)];
        records.extend((0..38).map(|_| rec(0, 50, true)));
        let cfg = ExperimentConfig {
            tx_count: 40,
            ..ExperimentConfig::default()
        };
        let run = SchemeRun {
            records,
            makespan: SimTime::from_millis(100_000),
            ..SchemeRun::default()
        };
        let report = build_report(&cfg, Scheme::Occ, &run);
        assert_eq!(report.tsr, 100.0);
        assert_eq!(report.latency.mean_ms, 50.0);
        assert_eq!(report.latency.p99_ms, 50.0);
    }

    #[test]
    fn empty_and_all_failed_runs_report_zeroes() {
        let cfg = ExperimentConfig::default();
        let report = build_report(&cfg, Scheme::Vanilla, &SchemeRun::default());
        assert_eq!(report.tsr, 0.0);
        assert_eq!(report.tps, 0.0);
        assert_eq!(report.latency.p50_ms, 0.0);
    }
}
