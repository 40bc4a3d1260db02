//! Sweep intermediary skew and compare success rate and throughput across
//! all four schemes.
//!
//! Skew is the share of transfers routed through one hot intermediary. The
//! per-key batching of the composite-key scheme absorbs that hotspot, while
//! every baseline serializes on the hot account key in some form: vanilla
//! loses whole batches to version conflicts, 2PL queues on the lock, OCC
//! burns validation rounds.
//!
//! Run with: cargo run --release --example skewness_sweep

use hicocs::harness::{run_sweep, ExperimentConfig, Scheme, SweepAxis};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig {
        shards: 4,
        intermediary_group_size: 20,
        tx_count: 10_000,
        concurrent_clients: 32,
        ..ExperimentConfig::default()
    };
    let skews = [10.0, 30.0, 50.0, 70.0, 90.0];
    let reports = run_sweep(&cfg, SweepAxis::Skewness, &skews, &Scheme::ALL)?;

    println!("{:>8} {:>6} {:>8} {:>9} {:>10} {:>10}", "scheme", "f%", "tsr%", "tps", "p99 ms", "conflicts");
    for r in &reports {
        println!(
            "{:>8} {:>6.0} {:>8.2} {:>9.2} {:>10.0} {:>10}",
            r.scheme.to_string(),
            r.skewness,
            r.tsr,
            r.tps,
            r.latency.p99_ms,
            r.mvcc_conflicts
        );
    }

    // The headline comparison: the batched scheme against the strongest
    // baseline at each skew level.
    println!();
    for f in skews {
        let at = |s: Scheme| reports.iter().find(|r| r.skewness == f && r.scheme == s).unwrap();
        let ours = at(Scheme::Hicocs);
        let best = [Scheme::Vanilla, Scheme::Twopl, Scheme::Occ]
            .into_iter()
            .map(at)
            .max_by(|a, b| a.tps.total_cmp(&b.tps))
            .unwrap();
        println!(
            "f={f:>2}: tsr {:.1}% vs {:.1}% ({}), tps x{:.2}",
            ours.tsr,
            best.tsr,
            best.scheme,
            ours.tps / best.tps
        );
    }
    Ok(())
}
