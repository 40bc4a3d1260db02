//! All four coordination schemes on one workload, side by side.
//!
//! Same topology, same seed, same 10,000 transfers with half the traffic
//! through one hot intermediary. The schemes differ only in how a transfer
//! claims its funds: batched sub-broker escrow, naive two-leg transfers,
//! two-phase locking, or optimistic validation.
//!
//! Run with: cargo run --release --example baseline_comparison

use hicocs::harness::{run_experiment, ExperimentConfig, Scheme};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = ExperimentConfig {
        shards: 4,
        concurrent_clients: 32,
        skewness: 50.0,
        ..ExperimentConfig::default()
    };

    let how = |s: Scheme| match s {
        Scheme::Hicocs => "per-transfer escrow keys, pooled settlement",
        Scheme::Vanilla => "two account-level legs, no coordination",
        Scheme::Twopl => "locks held across both legs",
        Scheme::Occ => "optimistic, validate at commit",
    };

    println!(
        "{:>8} {:>8} {:>8} {:>10} {:>10} {:>10}",
        "scheme", "tsr%", "tps", "p99 ms", "conflicts", "timeouts"
    );
    let mut reports = Vec::new();
    for scheme in Scheme::ALL {
        let mut cfg = base.clone();
        cfg.scheme = scheme;
        let r = run_experiment(&cfg)?;
        println!(
            "{:>8} {:>8.2} {:>8.2} {:>10.0} {:>10} {:>10}",
            r.scheme.to_string(),
            r.tsr,
            r.tps,
            r.latency.p99_ms,
            r.mvcc_conflicts,
            r.lock_timeouts
        );
        reports.push(r);
    }

    println!();
    for r in &reports {
        println!("{:>8}: {}", r.scheme.to_string(), how(r.scheme));
    }

    let ours = &reports[0];
    let best = reports[1..]
        .iter()
        .max_by(|a, b| a.tps.total_cmp(&b.tps))
        .expect("three baselines");
    println!(
        "\nat f=50: {:.1}% vs {:.1}% success, {:.2}x the best baseline's throughput ({})",
        ours.tsr,
        best.tsr,
        ours.tps / best.tps,
        best.scheme
    );
    Ok(())
}
