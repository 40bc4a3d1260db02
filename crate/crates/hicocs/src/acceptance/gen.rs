//! Seeded scenario generators shared by the verification suite and unit
//! tests. Everything is driven by a caller-supplied ChaCha stream so runs
//! are reproducible from a single seed.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clock::SimTime;
use crate::ledger::{Block, EndorsedTx, ReadWriteSet, TxId};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A randomized validation scenario: keys with pre-bumped versions and one
/// block of transactions whose read versions are sometimes current,
/// sometimes stale, sometimes claims about absent keys.
pub struct MvccScenario {
    /// How many times each pre-existing key was written before the block
    /// (version = writes - 1).
    pub initial_writes: BTreeMap<String, u64>,
    pub block: Block,
}

impl MvccScenario {
    pub fn initial_versions(&self) -> BTreeMap<String, u64> {
        self.initial_writes
            .iter()
            .map(|(k, w)| (k.clone(), w - 1))
            .collect()
    }
}

pub fn mvcc_scenario(rng: &mut ChaCha8Rng, next_tx_id: &mut u64) -> MvccScenario {
    let key_space: Vec<String> = (0..rng.gen_range(2..12)).map(|i| format!("k{i}")).collect();
    let mut initial_writes = BTreeMap::new();
    for key in &key_space {
        if rng.gen_bool(0.8) {
            initial_writes.insert(key.clone(), rng.gen_range(1..4u64));
        }
    }

    let tx_count = rng.gen_range(1..=100);
    let mut txs = Vec::with_capacity(tx_count);
    for _ in 0..tx_count {
        let mut keys = key_space.clone();
        keys.shuffle(rng);
        let n_reads = rng.gen_range(0..=3.min(keys.len()));
        let reads = keys[..n_reads]
            .iter()
            .map(|k| {
                let observed = if rng.gen_bool(0.3) {
                    None
                } else {
                    Some(rng.gen_range(0..4u64))
                };
                (k.clone(), observed)
            })
            .collect();
        keys.shuffle(rng);
        let n_writes = rng.gen_range(0..=3.min(keys.len()));
        let writes = keys[..n_writes]
            .iter()
            .map(|k| {
                let value = if rng.gen_bool(0.1) {
                    None // tombstone
                } else {
                    Some(format!("v{}", rng.gen_range(0..1000)))
                };
                (k.clone(), value)
            })
            .collect();
        let id = TxId(*next_tx_id);
        *next_tx_id += 1;
        txs.push(EndorsedTx {
            id,
            rwset: ReadWriteSet { reads, writes },
            byte_size: 100,
            submitted_at: SimTime::ZERO,
        });
    }
    let byte_size = txs.iter().map(|t| t.byte_size).sum();
    let block = Block {
        height: 1,
        txs,
        byte_size,
        formation_deadline: SimTime::from_millis(2000),
        closed_at: SimTime::from_millis(2000),
    };
    MvccScenario {
        initial_writes,
        block,
    }
}

/// Arrival-sorted (instant, byte_size) pairs with bursty gaps, for fuzzing
/// block formation against the prefix-sum oracle.
pub fn arrival_stream(rng: &mut ChaCha8Rng) -> Vec<(SimTime, u64)> {
    let n = rng.gen_range(0..60);
    let mut at = 0u64;
    (0..n)
        .map(|_| {
            at += if rng.gen_bool(0.3) {
                rng.gen_range(0..5_000) // burst
            } else {
                rng.gen_range(0..3_000_000_000) // lull, possibly past a timeout
            };
            let size = rng.gen_range(1..2_000_000u64);
            (SimTime::from_nanos(at), size)
        })
        .collect()
}
