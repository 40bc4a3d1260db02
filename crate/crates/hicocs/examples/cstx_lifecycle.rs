//! One cross-shard transfer end to end: admission, escrow debit, pooling
//! under the intermediary's composite key, and batched settlement.
//!
//! The amount travels encrypted. The source shard sees an escrow debit,
//! the pool holds ciphertext, and only the conversion step decodes an
//! aggregate. Exact fixed-point arithmetic moves the funds; the decoded
//! ciphertext sum is an audit value alongside it.
//!
//! Run with: cargo run --example cstx_lifecycle

use hicocs::crypto::HeBackendKind;
use hicocs::engine::{Admission, CrossShardEngine, CstxStatus, EngineConfig};
use hicocs::{Amount, Rate, SimTime};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ms = SimTime::from_millis;
    let cfg = EngineConfig {
        backend_kind: HeBackendKind::Approximate,
        rate: Rate::from_f64(1.25)?,
        batch_timeout: ms(100),
        ..EngineConfig::default()
    };
    let mut e = CrossShardEngine::new(cfg, 2);

    // The intermediary holds funds on both shards; it fronts liquidity on
    // the target side and recoups escrow on the source side.
    e.add_intermediary("g1", 0, 1, Amount::from_whole(1_000), Amount::from_whole(1_000))?;
    e.add_account("alice", 0, Amount::from_whole(500))?;
    e.add_account("bob", 1, Amount::ZERO)?;

    let uid = e.initiate_cstx("alice", "bob", "g1", "120.40".parse()?, ms(10))?;
    println!("initiated: status {:?}", e.status(uid)?);

    let admission = e.preprocess(uid, ms(10))?;
    assert_eq!(admission, Admission::Submitted);
    println!("admitted: escrow debit offered for ordering");

    // The batch window closes and the escrow debit commits on shard 0.
    let outcome = e.force_flush(0, ms(10)).expect("window had one tx");
    println!(
        "block {}: {} committed, {} conflicted",
        outcome.height, outcome.committed, outcome.conflicted
    );
    assert_eq!(e.status(uid)?, CstxStatus::Pooled);
    println!(
        "pooled: {} entry under g1, shard-0 escrow {}",
        e.pool_len("g1"),
        e.escrow_total(0)
    );
    println!("alice after escrow: {}", balance(&e, 0, "alice"));

    // Settlement: accumulate the pool ciphertext, convert by the encrypted
    // rate, then complete both sides with exact arithmetic.
    let report = e.settle("g1", ms(2_000))?;
    println!("\nsettled {} transfer(s):", report.n_txs);
    println!("  exact out {} -> in {} (rate 1.25)", report.out_exact, report.in_exact);
    println!(
        "  decoded aggregate out {:.6} -> in {:.6} (audit values)",
        report.result.out_amount, report.result.in_amount
    );
    for (receiver, credit) in &report.credits {
        println!("  credit {receiver}: {credit}");
    }

    assert_eq!(e.status(uid)?, CstxStatus::Completed);
    println!("\nfinal status {:?}", e.status(uid)?);
    println!("alice {} | bob {}", balance(&e, 0, "alice"), balance(&e, 1, "bob"));
    println!("escrow drained: {}", e.escrow_total(0));
    println!("audit trail: {} settlement line(s)", e.audits().len());
    Ok(())
}

fn balance(e: &CrossShardEngine, shard: usize, name: &str) -> Amount {
    e.shard_state(shard)
        .balance_of(&CrossShardEngine::account_key(name))
        .unwrap()
}
