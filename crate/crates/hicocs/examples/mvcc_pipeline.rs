//! The ledger layer on its own: endorse, order into blocks, then commit
//! with multi-version concurrency control.
//!
//! Every transaction carries the key versions it read at endorsement time.
//! The committer replays the block in order and marks a transaction invalid
//! the moment one of its reads is stale, so two transfers touching the same
//! account in one block cannot both land.
//!
//! Run with: cargo run --example mvcc_pipeline

use hicocs::ledger::{
    endorsement_byte_size, EndorsedTx, Orderer, ReadWriteSet, TxId, Verdict, VersionedWorldState,
};
use hicocs::{Amount, SimTime};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut state = VersionedWorldState::new();
    state.seed_account("acct:alice", Amount::from_whole(100));
    state.seed_account("acct:bob", Amount::from_whole(100));
    state.seed_account("acct:carol", Amount::from_whole(100));
    state.seed_account("acct:dan", Amount::from_whole(100));

    // Endorsement: simulate against current state, record read versions.
    let debit = |from: &str, to: &str, amount: i64, state: &VersionedWorldState| {
        let (from, to) = (format!("acct:{from}"), format!("acct:{to}"));
        let from_balance = state.balance_of(&from).unwrap();
        let to_balance = state.balance_of(&to).unwrap();
        ReadWriteSet {
            reads: vec![
                (from.clone(), state.version_of(&from)),
                (to.clone(), state.version_of(&to)),
            ],
            writes: vec![
                (from, Some((from_balance - Amount::from_whole(amount)).to_canonical_string())),
                (to, Some((to_balance + Amount::from_whole(amount)).to_canonical_string())),
            ],
        }
    };

    // Three endorsements against the same snapshot: alice->bob, the
    // disjoint carol->dan, and a second alice->carol that read alice's
    // balance before the first transfer committed.
    let rwsets = [
        debit("alice", "bob", 10, &state),
        debit("carol", "dan", 5, &state),
        debit("alice", "carol", 20, &state),
    ];

    // Ordering: transactions queue in a window that closes on size or
    // deadline, whichever comes first.
    let mut orderer = Orderer::new(1024 * 1024, SimTime::from_millis(200));
    let now = SimTime::from_millis(5);
    for (i, rwset) in rwsets.into_iter().enumerate() {
        let byte_size = endorsement_byte_size(&rwset);
        let tx = EndorsedTx { id: TxId(i as u64), rwset, byte_size, submitted_at: now };
        println!("offered tx {i} ({byte_size} bytes)");
        assert!(orderer.offer(tx, now).is_none(), "window closed early");
    }
    println!("window deadline: {:?}", orderer.deadline());

    let block = orderer.flush_due(SimTime::from_millis(205)).expect("deadline passed");
    println!("\nblock {} holds {} txs", block.height, block.txs.len());

    // Commit: serial validation, version checks first.
    let verdicts = state.validate_and_commit(&block);
    for (tx, verdict) in block.txs.iter().zip(&verdicts) {
        println!("  tx {:?}: {verdict:?}", tx.id);
    }
    assert_eq!(verdicts, vec![Verdict::Valid, Verdict::Valid, Verdict::MvccConflict]);

    // The conflicted transfer left no trace; the other two landed.
    println!("\nbalances after commit:");
    for name in ["acct:alice", "acct:bob", "acct:carol", "acct:dan"] {
        println!("  {name}: {} (version {:?})", state.balance_of(name)?, state.version_of(name));
    }
    let stats = state.stats();
    println!(
        "\nledger stats: {} blocks, {} valid, {} conflicted",
        stats.blocks_committed, stats.txs_valid, stats.txs_conflicted
    );
    Ok(())
}
