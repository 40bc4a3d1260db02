//! Why batching under sub-broker keys beats touching the intermediary's
//! account row: the same eight concurrent transfers, run both ways.
//!
//! Account-level transfers all read and write the intermediary's balance,
//! so one block admits exactly one of them and the rest conflict. The
//! batched scheme gives each transfer its own composite-key escrow entry;
//! the intermediary's row is untouched until one settlement pays the whole
//! pool out.
//!
//! Run with: cargo run --example batched_settlement

use hicocs::crypto::HeBackendKind;
use hicocs::engine::{Admission, CrossShardEngine, EngineConfig};
use hicocs::ledger::{
    endorsement_byte_size, EndorsedTx, Orderer, ReadWriteSet, TxId, Verdict, VersionedWorldState,
};
use hicocs::{Amount, SimTime};

const K: usize = 8;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ms = SimTime::from_millis;

    // Account-level: each transfer bumps the shared intermediary row.
    let mut state = VersionedWorldState::new();
    state.seed_account("acct:g1", Amount::from_whole(1_000));
    for i in 0..K {
        state.seed_account(&format!("acct:sender{i}"), Amount::from_whole(100));
    }
    let mut orderer = Orderer::new(1024 * 1024, ms(100));
    for i in 0..K {
        let sender = format!("acct:sender{i}");
        let rwset = ReadWriteSet {
            reads: vec![(sender.clone(), Some(0)), ("acct:g1".into(), Some(0))],
            writes: vec![
                (sender, Some(Amount::from_whole(90).to_canonical_string())),
                ("acct:g1".into(), Some(Amount::from_whole(1_010).to_canonical_string())),
            ],
        };
        let byte_size = endorsement_byte_size(&rwset);
        orderer.offer(EndorsedTx { id: TxId(i as u64), rwset, byte_size, submitted_at: ms(5) }, ms(5));
    }
    let block = orderer.flush(ms(5)).expect("one open window");
    let verdicts = state.validate_and_commit(&block);
    let valid = verdicts.iter().filter(|v| **v == Verdict::Valid).count();
    println!("account-level: {valid}/{K} committed in one block (shared row serializes)");

    // Batched: same eight transfers, each escrowed under its own key.
    let cfg = EngineConfig {
        backend_kind: HeBackendKind::Mock,
        batch_timeout: ms(100),
        ..EngineConfig::default()
    };
    let mut e = CrossShardEngine::new(cfg, 2);
    e.add_intermediary("g1", 0, 1, Amount::from_whole(1_000), Amount::from_whole(1_000))?;
    for i in 0..K {
        e.add_account(&format!("sender{i}"), 0, Amount::from_whole(100))?;
        e.add_account(&format!("recv{i}"), 1, Amount::ZERO)?;
    }
    for i in 0..K {
        let uid = e.initiate_cstx(
            &format!("sender{i}"),
            &format!("recv{i}"),
            "g1",
            Amount::from_whole(10),
            ms(5),
        )?;
        assert_eq!(e.preprocess(uid, ms(5))?, Admission::Submitted);
    }
    let outcome = e.force_flush(0, ms(5)).expect("one open window");
    println!(
        "batched:       {}/{K} committed in one block, {} version conflicts",
        outcome.committed, outcome.conflicted
    );
    assert_eq!((outcome.committed, outcome.conflicted), (K, 0));

    // One settlement pays every receiver and touches the intermediary row
    // twice (escrow release and liquidity debit), no matter how many
    // transfers pooled.
    println!("pool before settlement: {} entries", e.pool_len("g1"));
    let report = e.settle("g1", ms(2_000))?;
    println!(
        "settled {} transfers in one pass: out {}, in {}, {} receivers credited",
        report.n_txs,
        report.out_exact,
        report.in_exact,
        report.credits.len()
    );
    assert_eq!(e.terminal_counts(), (K, 0));
    Ok(())
}
