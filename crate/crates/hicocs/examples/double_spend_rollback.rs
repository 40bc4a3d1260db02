//! Double-spend arbitration and the rollback cascade.
//!
//! Part one: two transfers racing to spend the same balance through
//! different intermediaries. Admission is serialized per initiator and
//! reserves funds, so the second race loses immediately; pooled batches
//! never hold more debits than the initiator could cover.
//!
//! Part two: a transfer admitted against an unsettled inbound credit is
//! chained to its funding transfer. If the funding transfer is rolled back,
//! the chained one falls with it; transfers with independent funding do
//! not.
//!
//! Run with: cargo run --example double_spend_rollback

use hicocs::crypto::HeBackendKind;
use hicocs::engine::{Admission, CrossShardEngine, CstxStatus, EngineConfig, EngineError};
use hicocs::{Amount, SimTime};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ms = SimTime::from_millis;
    let cfg = EngineConfig {
        backend_kind: HeBackendKind::Mock,
        batch_timeout: ms(100),
        ..EngineConfig::default()
    };
    let mut e = CrossShardEngine::new(cfg, 2);
    e.add_intermediary("g1", 0, 1, Amount::from_whole(1_000), Amount::from_whole(1_000))?;
    e.add_intermediary("g2", 0, 1, Amount::from_whole(1_000), Amount::from_whole(1_000))?;
    e.add_intermediary("g3", 1, 0, Amount::from_whole(1_000), Amount::from_whole(1_000))?;
    e.add_account("mallory", 0, Amount::from_whole(80))?;
    e.add_account("bob", 1, Amount::ZERO)?;
    e.add_account("carol", 0, Amount::ZERO)?;
    e.add_account("dan", 1, Amount::from_whole(200))?;

    // Part one: 60 + 60 > 80. The first admission reserves 60; the second
    // sees only 20 left and is refused before anything reaches a block.
    println!("mallory holds 80, races two transfers of 60 through g1 and g2");
    let winner = e.initiate_cstx("mallory", "bob", "g1", Amount::from_whole(60), ms(10))?;
    let loser = e.initiate_cstx("mallory", "bob", "g2", Amount::from_whole(60), ms(10))?;
    assert_eq!(e.preprocess(winner, ms(10))?, Admission::Submitted);
    match e.preprocess(loser, ms(10)) {
        Err(EngineError::InsufficientBalance { available, needed, .. }) => {
            println!("  second race refused: {available} available, {needed} needed");
        }
        other => panic!("expected a refusal, got {other:?}"),
    }
    assert_eq!(e.status(loser)?, CstxStatus::RolledBack);
    e.flush_shard(0, ms(200));
    println!("  winner escrowed; loser terminal without touching the ledger\n");

    // Part two: bob has no committed balance, only the winner's unsettled
    // 60. A transfer spending it parks, chained to the winner.
    let chained = e.initiate_cstx("bob", "carol", "g3", Amount::from_whole(40), ms(210))?;
    assert_eq!(e.preprocess(chained, ms(210))?, Admission::Parked);
    println!("bob -> carol admitted against the unsettled credit (parked, chained to the winner)");

    // An unrelated transfer with its own funds pools alongside.
    let independent = e.initiate_cstx("dan", "carol", "g3", Amount::from_whole(30), ms(220))?;
    assert_eq!(e.preprocess(independent, ms(220))?, Admission::Submitted);
    e.flush_shard(1, ms(400));

    // The funding transfer dies before settlement; the chain falls with
    // it, the independent transfer does not.
    let cascade = e.rollback(winner, ms(500))?;
    println!("rolling back the winner cascades through {cascade:?}");
    assert_eq!(cascade, vec![winner, chained]);
    assert_eq!(e.status(chained)?, CstxStatus::RolledBack);
    assert_eq!(e.status(independent)?, CstxStatus::Pooled);

    let report = e.settle("g3", ms(2_000))?;
    println!("settlement still pays the independent transfer: credits {:?}", report.credits);
    assert_eq!(e.status(independent)?, CstxStatus::Completed);

    // Escrow refunded, nothing created or destroyed.
    println!("\nmallory {} (escrow refunded)", balance(&e, 0, "mallory"));
    println!("carol   {} (independent transfer only)", balance(&e, 0, "carol"));
    let (completed, rolled_back) = e.terminal_counts();
    println!("terminal: {completed} completed, {rolled_back} rolled back");
    Ok(())
}

fn balance(e: &CrossShardEngine, shard: usize, name: &str) -> Amount {
    e.shard_state(shard)
        .balance_of(&CrossShardEngine::account_key(name))
        .unwrap()
}
