//! Composite-key reuse: compact a pool that accumulated many entries for
//! the same (intermediary, initiator) pairs into one merged entry per pair,
//! without changing what settlement pays.
//!
//! Reuse is an off-path epoch: an elected intermediary groups the pool by
//! pair, homomorphically folds each group's ciphertexts, writes one merged
//! entry per pair, and tombstones the originals. A proof-of-equivalence
//! digest over the grouping structure lets every shard re-derive and check
//! the same compaction. Settlement afterwards scans far fewer entries.
//!
//! Run with: cargo run --example composite_key_reuse

use hicocs::crypto::HeBackendKind;
use hicocs::engine::{Admission, CrossShardEngine, EngineConfig};
use hicocs::reuse::run_reuse_epoch;
use hicocs::{Amount, SimTime};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ms = SimTime::from_millis;
    let build = || -> Result<CrossShardEngine, Box<dyn std::error::Error>> {
        let cfg = EngineConfig {
            backend_kind: HeBackendKind::Mock,
            batch_timeout: ms(100),
            ..EngineConfig::default()
        };
        let mut e = CrossShardEngine::new(cfg, 2);
        for g in ["g1", "g2"] {
            e.add_intermediary(g, 0, 1, Amount::from_whole(1), Amount::from_whole(100_000))?;
        }
        for o in 0..5 {
            e.add_account(&format!("o{o}"), 0, Amount::from_whole(10_000))?;
        }
        for d in 0..3 {
            e.add_account(&format!("d{d}"), 1, Amount::ZERO)?;
        }
        Ok(e)
    };

    // Two identical engines fed the same 200 transfers over 10 distinct
    // (intermediary, initiator) pairs; only one runs a reuse epoch.
    let mut plain = build()?;
    let mut reused = build()?;
    for e in [&mut plain, &mut reused] {
        for i in 0..200usize {
            let uid = e.initiate_cstx(
                &format!("o{}", i % 5),
                &format!("d{}", i % 3),
                if i % 2 == 0 { "g1" } else { "g2" },
                Amount::from_f64_round(1.0 + (i as f64) * 0.25),
                ms(10),
            )?;
            assert_eq!(e.preprocess(uid, ms(10))?, Admission::Submitted);
            e.force_flush(0, ms(10));
        }
    }
    let group = plain.intermediary_names();
    let pool = |e: &CrossShardEngine| e.pool_len("g1") + e.pool_len("g2");
    println!("pool before reuse: {} entries in both engines", pool(&plain));

    let audit = run_reuse_epoch(&mut reused, &group, 0, 42, ms(500))?;
    println!(
        "reuse epoch {}: elected {}, pool {} -> {}, digest {}",
        audit.epoch,
        audit.elected,
        audit.pool_before,
        audit.pool_after,
        &audit.digest[..16]
    );
    assert_eq!(pool(&reused), 10);

    // Settlement pays the same credits either way, but the compacted pool
    // costs a fraction of the ledger scan.
    println!("\n{:>4} {:>10} {:>10} {:>14} {:>14}", "g", "txs", "credits", "scan (plain)", "scan (reused)");
    for g in &group {
        let a = plain.settle(g, ms(2_000))?;
        let b = reused.settle(g, ms(2_000))?;
        assert_eq!(a.credits, b.credits);
        assert_eq!(a.in_exact, b.in_exact);
        println!(
            "{g:>4} {:>10} {:>10} {:>14} {:>14}",
            a.n_txs,
            a.credits.len(),
            a.entries_scanned,
            b.entries_scanned
        );
    }
    assert_eq!(plain.terminal_counts(), reused.terminal_counts());
    println!("\nboth engines completed {} transfers identically", plain.terminal_counts().0);
    Ok(())
}
