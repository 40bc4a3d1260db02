//! Benchmark harness: config files in, workloads through a scheme,
//! metric reports out.
//!
//! The pipeline is `ExperimentConfig` -> [`generate_workload`] ->
//! [`run_scheme`] -> [`build_report`], wrapped by [`run_experiment`] for a
//! single run and [`run_sweep`] for a parameter sweep. Determinism contract:
//! identical (config, seed) pairs produce identical reports and identical
//! exported bytes.

use std::str::FromStr;

use thiserror::Error;

pub mod config;
pub mod export;
pub mod metrics;
pub mod sim;
pub mod workload;

pub use config::{ExperimentConfig, Scheme};
pub use export::{csv_string, export_csv, export_json, json_string, CSV_HEADER};
pub use metrics::{build_report, CpuMemProxy, LatencyStats, MetricsReport};
pub use sim::{run_scheme, SchemeRun, TxRecord};
pub use workload::{build_topology, generate_workload, Topology, WorkloadTx};

use crate::engine::EngineError;
use crate::reuse::ReuseError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("CONFIG_INVALID: {0}")]
    ConfigInvalid(String),
    #[error("BAD_TRACE: {0}")]
    BadTrace(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Reuse(#[from] ReuseError),
    #[error("run stalled: {0}")]
    Stalled(String),
}

/// One full run of the configured scheme over the configured workload.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport, HarnessError> {
    cfg.validate()?;
    let load = generate_workload(cfg)?;
    let run = run_scheme(cfg, cfg.scheme, &load)?;
    Ok(build_report(cfg, cfg.scheme, &run))
}

/// The config dimension a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Skewness,
    BlockSize,
    TxCount,
}

impl SweepAxis {
    fn apply(self, cfg: &mut ExperimentConfig, value: f64) {
        match self {
            SweepAxis::Skewness => cfg.skewness = value,
            SweepAxis::BlockSize => cfg.block_size_mb = value as u64,
            SweepAxis::TxCount => cfg.tx_count = value as usize,
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::Skewness => "skewness",
            SweepAxis::BlockSize => "block_size",
            SweepAxis::TxCount => "tx_count",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "skewness" => Ok(SweepAxis::Skewness),
            "block_size" => Ok(SweepAxis::BlockSize),
            "tx_count" => Ok(SweepAxis::TxCount),
            other => Err(format!(
                "unknown sweep axis: {other} (expected skewness, block_size, or tx_count)"
            )),
        }
    }
}

/// Run every (value, scheme) combination of the sweep; one report each, in
/// value-major order. Every scheme at a given axis value sees the exact
/// same workload.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
    schemes: &[Scheme],
) -> Result<Vec<MetricsReport>, HarnessError> {
    base.validate()?;
    if values.is_empty() {
        return Err(HarnessError::ConfigInvalid("sweep needs values".into()));
    }
    if schemes.is_empty() {
        return Err(HarnessError::ConfigInvalid("sweep needs schemes".into()));
    }
    let mut reports = Vec::with_capacity(values.len() * schemes.len());
    for &value in values {
        let mut cfg = base.clone();
        axis.apply(&mut cfg, value);
        cfg.validate()?;
        let load = generate_workload(&cfg)?;
        for &scheme in schemes {
            let run = run_scheme(&cfg, scheme, &load)?;
            reports.push(build_report(&cfg, scheme, &run));
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(scheme: Scheme) -> ExperimentConfig {
        ExperimentConfig {
            shards: 2,
            intermediary_group_size: 2,
            skewness: 30.0,
            tx_count: 60,
            concurrent_clients: 6,
            batch_timeout_ms: 200,
            t_settle_ms: 200,
            reuse_every_k: 3,
            scheme,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn a_single_transfer_succeeds_under_every_scheme() {
        for scheme in Scheme::ALL {
            let report = run_experiment(&ExperimentConfig {
                tx_count: 1,
                concurrent_clients: 2,
                ..tiny(scheme)
            })
            .unwrap();
            assert_eq!(report.tsr, 100.0, "{scheme}");
            assert_eq!(report.completed, 1, "{scheme}");
            assert_eq!(report.retries, 0, "{scheme}");
            assert!(report.tps > 0.0, "{scheme}");
            assert!(report.latency.p99_ms > 0.0, "{scheme}");
        }
    }

    #[test]
    fn every_scheme_drives_the_whole_workload_terminal() {
        for scheme in Scheme::ALL {
            let report = run_experiment(&tiny(scheme)).unwrap();
            assert_eq!(report.completed + report.rolled_back, 60, "{scheme}");
            assert!(report.tsr > 0.0, "{scheme}");
        }
    }

    #[test]
    fn the_batched_scheme_completes_everything_and_samples_its_pool() {
        let report = run_experiment(&tiny(Scheme::Hicocs)).unwrap();
        assert_eq!(report.tsr, 100.0);
        assert!(!report.pool_size_series.is_empty());
        assert!(!report.query_time_series.is_empty());
        assert!(report.cpu_mem_proxy.peak_pool_entries > 0);
        assert!(report.cpu_mem_proxy.entries_scanned > 0);
    }

    #[test]
    fn identical_config_and_seed_export_identical_bytes() {
        for scheme in [Scheme::Hicocs, Scheme::Vanilla] {
            let cfg = tiny(scheme);
            let a = run_experiment(&cfg).unwrap();
            let b = run_experiment(&cfg).unwrap();
            assert_eq!(csv_string(&[a.clone()]), csv_string(&[b.clone()]));
            assert_eq!(
                json_string(&[a]).unwrap(),
                json_string(&[b]).unwrap()
            );
        }
    }

    #[test]
    fn a_singleton_sweep_matches_the_single_run() {
        let mut cfg = tiny(Scheme::Occ);
        let sweep = run_sweep(&cfg, SweepAxis::Skewness, &[70.0], &[Scheme::Occ]).unwrap();
        cfg.skewness = 70.0;
        let single = run_experiment(&cfg).unwrap();
        assert_eq!(csv_string(&sweep), csv_string(&[single]));
    }

    #[test]
    fn sweeps_emit_value_major_report_order() {
        let cfg = tiny(Scheme::Hicocs);
        let schemes = [Scheme::Hicocs, Scheme::Vanilla];
        let reports = run_sweep(&cfg, SweepAxis::Skewness, &[10.0, 90.0], &schemes).unwrap();
        assert_eq!(reports.len(), 4);
        let got: Vec<(f64, Scheme)> = reports.iter().map(|r| (r.skewness, r.scheme)).collect();
        assert_eq!(
            got,
            vec![
                (10.0, Scheme::Hicocs),
                (10.0, Scheme::Vanilla),
                (90.0, Scheme::Hicocs),
                (90.0, Scheme::Vanilla),
            ]
        );
        let csv = csv_string(&reports);
        assert_eq!(csv.matches(CSV_HEADER).count(), 1);
        assert_eq!(csv.lines().count(), 5);
    }

    #[test]
    fn sweep_axes_parse_by_name() {
        assert_eq!("skewness".parse::<SweepAxis>().unwrap(), SweepAxis::Skewness);
        assert_eq!("block_size".parse::<SweepAxis>().unwrap(), SweepAxis::BlockSize);
        assert_eq!("tx_count".parse::<SweepAxis>().unwrap(), SweepAxis::TxCount);
        assert!("latency".parse::<SweepAxis>().is_err());
        let mut cfg = tiny(Scheme::Hicocs);
        SweepAxis::TxCount.apply(&mut cfg, 12.0);
        assert_eq!(cfg.tx_count, 12);
        SweepAxis::BlockSize.apply(&mut cfg, 2.0);
        assert_eq!(cfg.block_size_mb, 2);
    }

    #[test]
    fn exports_write_both_formats_to_disk() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_experiment(&ExperimentConfig {
            tx_count: 4,
            concurrent_clients: 2,
            ..tiny(Scheme::Hicocs)
        })
        .unwrap();
        let reports = vec![report];
        let csv_path = dir.path().join("results.csv");
        let json_path = dir.path().join("results.json");
        export_csv(&reports, &csv_path).unwrap();
        export_json(&reports, &json_path).unwrap();
        assert_eq!(std::fs::read_to_string(&csv_path).unwrap(), csv_string(&reports));
        let text = std::fs::read_to_string(&json_path).unwrap();
        assert!(text.contains("\"pool_size_series\""));
        assert!(text.contains("\"scheme\": \"hicocs\""));
    }

    #[test]
    fn csv_rows_have_a_frozen_layout() {
        let report = MetricsReport {
            scheme: Scheme::Twopl,
            skewness: 30.0,
            block_size_mb: 40,
            tx_count: 10_000,
            tsr: 97.5,
            tps: 123.456,
            latency: LatencyStats {
                mean_ms: 10.5,
                p50_ms: 9.0,
                p99_ms: 20.25,
            },
            mvcc_conflicts: 3,
            retries: 1,
            lock_timeouts: 2,
            completed: 9_750,
            rolled_back: 250,
            pool_size_series: Vec::new(),
            query_time_series: Vec::new(),
            cpu_mem_proxy: CpuMemProxy::default(),
            seed: 7,
        };
        assert_eq!(
            export::csv_row(&report),
            "twopl,30.0,40,10000,97.5000,123.4560,10.50,9.00,20.25,3,1"
        );
    }
}
