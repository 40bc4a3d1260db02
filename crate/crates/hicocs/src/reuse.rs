//! Composite-key reuse: periodic pool compaction between settlements.
//!
//! Every pooled transfer owns one virtual sub-broker entry, so a busy
//! intermediary accumulates thousands of ledger keys between settlements
//! and every fuzzy pool query pays for scanning them. Reuse merges the
//! entries that share an (intermediary, initiator) pair into a single
//! merged record whose payload maps each receiver to the ciphertext sum of
//! that receiver's amounts. Settlement semantics are preserved exactly; the
//! pool and its query cost shrink to the number of distinct pairs.
//!
//! The protocol runs in two steps on a quiescent pool (never concurrently
//! with a settlement for the same shard pair):
//!
//! 1. [`ckpoe_summarize`]: one elected intermediary groups the current pool
//!    snapshot by (intermediary, initiator) and folds the amounts per
//!    receiver, entirely in the homomorphic domain. The result carries a
//!    digest of the grouping structure; other intermediaries validate by
//!    recomputing the same digest over the same snapshot.
//! 2. [`ckpoe_regenerate`]: if the live pool still matches the digest, the
//!    old entries are tombstoned and the merged records installed. A pool
//!    that changed in between fails with `StaleSnapshot` and the epoch is
//!    retried later.
//!
//! Election of the summarizing intermediary is seeded and uniform, so every
//! node replaying the schedule elects the same party per epoch.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::clock::SimTime;
use crate::crypto::{CipherVector, CryptoError, PartyId, Role};
use crate::engine::{CrossShardEngine, EngineError, MergedMember, PoolSlot, TxUid};
use crate::ledger::{create_composite_key, LedgerError};

/// Ledger value stored under a merged entry; like raw sub-broker entries,
/// the key carries the identity and the value is an opaque marker.
pub const MERGED_VALUE: &str = "merged";

#[derive(Debug, Error, PartialEq)]
pub enum ReuseError {
    #[error("cannot elect from an empty intermediary group")]
    EmptyGroup,
    #[error("pool changed since summarization; retry next epoch")]
    StaleSnapshot,
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// One merged record: all pooled transfers of `initiator` through
/// `intermediary`, folded per receiver under ciphertext.
pub struct MergedComKey {
    pub intermediary: PartyId,
    pub initiator: PartyId,
    /// Rendered composite key of the merged entry.
    pub rendered: String,
    /// Receiver -> ciphertext sum of that receiver's amounts.
    pub payload: BTreeMap<PartyId, CipherVector>,
    /// The transfers this record replaces, as (uid, receiver) pairs.
    pub members: Vec<(TxUid, PartyId)>,
}

/// The summarization output: merged records plus the snapshot digest that
/// regeneration (and validating peers) must reproduce.
pub struct TempComKeyPool {
    pub epoch: u64,
    pub elected: PartyId,
    pub merged: Vec<MergedComKey>,
    /// Digest of the grouping structure of the snapshot this was built
    /// from. Ciphertext bytes are excluded: backend noise makes them
    /// non-canonical, while the grouping is what settlement semantics
    /// depend on.
    pub digest: String,
    /// Pool entries covered by the snapshot.
    pub pool_before: usize,
}

/// Audit line appended after every applied reuse epoch.
#[derive(Debug, Clone, Serialize)]
pub struct ReuseAudit {
    pub epoch: u64,
    pub elected: PartyId,
    pub pool_before: usize,
    pub pool_after: usize,
    pub digest: String,
}

/// Pick the intermediary that summarizes this epoch: deterministic under
/// `(epoch, seed)`, uniform over the group.
pub fn elect_reuse_intermediary(
    group: &[PartyId],
    epoch: u64,
    seed: u64,
) -> Result<PartyId, ReuseError> {
    if group.is_empty() {
        return Err(ReuseError::EmptyGroup);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    Ok(group[rng.gen_range(0..group.len())].clone())
}

/// Grouping structure of a pool: (intermediary, initiator) -> receiver ->
/// sorted transfer uids. Both the live pool and a temp pool reduce to this
/// shape, which is what the digest canonicalizes.
type Grouping = BTreeMap<(PartyId, PartyId), BTreeMap<PartyId, Vec<TxUid>>>;

fn grouping_of(engine: &CrossShardEngine, group: &[PartyId]) -> Grouping {
    let mut out: Grouping = BTreeMap::new();
    for (_, slot) in engine.pool_slots() {
        match slot {
            PoolSlot::Raw { uid } => {
                let tx = engine.tx(*uid).expect("pool slots index live transfers");
                if !group.contains(&tx.intermediary) {
                    continue;
                }
                out.entry((tx.intermediary.clone(), tx.initiator.clone()))
                    .or_default()
                    .entry(tx.receiver.clone())
                    .or_default()
                    .push(*uid);
            }
            PoolSlot::Merged {
                intermediary,
                initiator,
                members,
                ..
            } => {
                if !group.contains(intermediary) {
                    continue;
                }
                let per_receiver = out
                    .entry((intermediary.clone(), initiator.clone()))
                    .or_default();
                for m in members {
                    per_receiver.entry(m.receiver.clone()).or_default().push(m.uid);
                }
            }
        }
    }
    for per_receiver in out.values_mut() {
        for uids in per_receiver.values_mut() {
            uids.sort_unstable();
        }
    }
    out
}

fn digest_grouping(grouping: &Grouping) -> String {
    let mut hasher = Sha256::new();
    for ((g, o), per_receiver) in grouping {
        hasher.update(g.as_bytes());
        hasher.update([0x1f]);
        hasher.update(o.as_bytes());
        hasher.update([0x1e]);
        for (receiver, uids) in per_receiver {
            hasher.update(receiver.as_bytes());
            for uid in uids {
                hasher.update(uid.to_le_bytes());
            }
            hasher.update([0x1d]);
        }
    }
    hex::encode(hasher.finalize())
}

/// Summarize the current pool of every intermediary in `group`: group
/// entries by (intermediary, initiator) and fold each receiver's amounts
/// into one ciphertext. Raw transport ciphertexts are converted inside the
/// conversion service; existing merged payloads are added in directly, so
/// no plaintext appears anywhere.
///
/// An empty pool yields an empty temp pool; that is not an error.
pub fn ckpoe_summarize(
    engine: &CrossShardEngine,
    group: &[PartyId],
    elected: &str,
    epoch: u64,
    now: SimTime,
) -> Result<TempComKeyPool, ReuseError> {
    let grouping = grouping_of(engine, group);
    let digest = digest_grouping(&grouping);
    let pool_before: usize = group.iter().map(|g| engine.pool_len(g)).sum();

    let ctx = engine
        .store()
        .conversion_context(Role::ConversionService, now)?;
    let backend = engine.backend();
    let keyset = engine.he_keyset();

    // Fold ciphertexts per (g, O, D). The grouping fixes the structure;
    // this pass only fills in the payload vectors.
    let mut merged = Vec::new();
    let mut payloads: BTreeMap<(PartyId, PartyId), BTreeMap<PartyId, CipherVector>> =
        BTreeMap::new();
    for (_, slot) in engine.pool_slots() {
        match slot {
            PoolSlot::Raw { uid } => {
                let tx = engine.tx(*uid).expect("pool slots index live transfers");
                if !group.contains(&tx.intermediary) {
                    continue;
                }
                let per_receiver = payloads
                    .entry((tx.intermediary.clone(), tx.initiator.clone()))
                    .or_default();
                let acc = per_receiver.remove(&tx.receiver);
                let folded = ctx.fold_into(backend, keyset, acc, &tx.initiator, &tx.cipher, now)?;
                per_receiver.insert(tx.receiver.clone(), folded);
            }
            PoolSlot::Merged {
                intermediary,
                initiator,
                payload,
                ..
            } => {
                if !group.contains(intermediary) {
                    continue;
                }
                let per_receiver = payloads
                    .entry((intermediary.clone(), initiator.clone()))
                    .or_default();
                for (receiver, cipher) in payload {
                    let next = match per_receiver.remove(receiver) {
                        None => cipher.clone(),
                        Some(acc) => backend.he_add(&acc, cipher)?,
                    };
                    per_receiver.insert(receiver.clone(), next);
                }
            }
        }
    }

    for ((g, o), payload) in payloads {
        let rendered = create_composite_key("cstxm", &[&g, &o])
            .map_err(LedgerError::from)
            .map_err(EngineError::from)?;
        let members: Vec<(TxUid, PartyId)> = grouping[&(g.clone(), o.clone())]
            .iter()
            .flat_map(|(receiver, uids)| uids.iter().map(|u| (*u, receiver.clone())))
            .collect();
        merged.push(MergedComKey {
            intermediary: g,
            initiator: o,
            rendered,
            payload,
            members,
        });
    }

    Ok(TempComKeyPool {
        epoch,
        elected: elected.to_string(),
        merged,
        digest,
        pool_before,
    })
}

/// Install a summarized pool: tombstone the snapshot's entries, write one
/// merged entry per (intermediary, initiator), and record the audit line.
///
/// Fails with `StaleSnapshot` when the live pool no longer matches the
/// temp pool's digest, which covers both a changed pool and a failed
/// validation by a recomputing peer (the digest is the validation).
pub fn ckpoe_regenerate(
    engine: &mut CrossShardEngine,
    group: &[PartyId],
    temp: TempComKeyPool,
) -> Result<ReuseAudit, ReuseError> {
    let live = digest_grouping(&grouping_of(engine, group));
    if live != temp.digest {
        return Err(ReuseError::StaleSnapshot);
    }

    // Per shard: tombstone every snapshot key that is not about to be
    // re-installed, then write the merged entries.
    let mut writes_by_shard: BTreeMap<usize, Vec<(String, Option<String>)>> = BTreeMap::new();
    let reinstall: Vec<&str> = temp.merged.iter().map(|m| m.rendered.as_str()).collect();
    let mut old_keys: Vec<(usize, String)> = Vec::new();
    for (key, slot) in engine.pool_slots() {
        let g = match slot {
            PoolSlot::Raw { uid } => &engine.tx(*uid).expect("live transfer").intermediary,
            PoolSlot::Merged { intermediary, .. } => intermediary,
        };
        if group.contains(g) {
            let shard = engine
                .intermediary(g)
                .expect("pooled intermediary is registered")
                .source_shard;
            old_keys.push((shard, key.clone()));
        }
    }
    for (shard, key) in &old_keys {
        if !reinstall.contains(&key.as_str()) {
            writes_by_shard
                .entry(*shard)
                .or_default()
                .push((key.clone(), None));
        }
    }
    for m in &temp.merged {
        let shard = engine
            .intermediary(&m.intermediary)
            .expect("summarized intermediary is registered")
            .source_shard;
        writes_by_shard
            .entry(shard)
            .or_default()
            .push((m.rendered.clone(), Some(MERGED_VALUE.to_string())));
    }

    for (_, key) in &old_keys {
        engine.pool_slots_mut().remove(key);
    }
    for (shard, writes) in writes_by_shard {
        engine.rewrite_pool_entries(shard, &writes);
    }
    for m in temp.merged {
        engine.pool_slots_mut().insert(
            m.rendered.clone(),
            PoolSlot::Merged {
                intermediary: m.intermediary,
                initiator: m.initiator,
                payload: m.payload,
                members: m
                    .members
                    .into_iter()
                    .map(|(uid, receiver)| MergedMember { uid, receiver })
                    .collect(),
            },
        );
    }

    let pool_after: usize = group.iter().map(|g| engine.pool_len(g)).sum();
    let audit = ReuseAudit {
        epoch: temp.epoch,
        elected: temp.elected,
        pool_before: temp.pool_before,
        pool_after,
        digest: temp.digest,
    };
    engine.record_reuse_audit(audit.clone());
    Ok(audit)
}

/// One full reuse epoch over `group`: elect, summarize, regenerate.
pub fn run_reuse_epoch(
    engine: &mut CrossShardEngine,
    group: &[PartyId],
    epoch: u64,
    seed: u64,
    now: SimTime,
) -> Result<ReuseAudit, ReuseError> {
    let elected = elect_reuse_intermediary(group, epoch, seed)?;
    let temp = ckpoe_summarize(engine, group, &elected, epoch, now)?;
    ckpoe_regenerate(engine, group, temp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::amount::{Amount, Rate};
    use crate::crypto::HeBackendKind;
    use crate::engine::{Admission, CstxStatus, EngineConfig};

    fn amt(s: &str) -> Amount {
        s.parse().unwrap()
    }

    fn ms(v: u64) -> SimTime {
        SimTime::from_millis(v)
    }

    fn engine(kind: HeBackendKind, rate: f64) -> CrossShardEngine {
        let cfg = EngineConfig {
            backend_kind: kind,
            rate: Rate::from_f64(rate).unwrap(),
            batch_timeout: ms(100),
            ..EngineConfig::default()
        };
        let mut e = CrossShardEngine::new(cfg, 2);
        e.add_intermediary("g1", 0, 1, Amount::from_whole(1_000), Amount::from_whole(1_000))
            .unwrap();
        for o in ["O1", "O2", "O3"] {
            e.add_account(o, 0, Amount::from_whole(500)).unwrap();
        }
        for d in ["D1", "D2", "D3", "D4"] {
            e.add_account(d, 1, Amount::ZERO).unwrap();
        }
        e
    }

    fn pool_one(e: &mut CrossShardEngine, from: &str, to: &str, amount: &str) -> TxUid {
        let uid = e.initiate_cstx(from, to, "g1", amt(amount), ms(10)).unwrap();
        assert_eq!(e.preprocess(uid, ms(10)).unwrap(), Admission::Submitted);
        e.force_flush(0, ms(10)).unwrap();
        assert_eq!(e.status(uid).unwrap(), CstxStatus::Pooled);
        uid
    }

    fn decode_slot0(e: &CrossShardEngine, cipher: &CipherVector) -> f64 {
        let ctx = e
            .store()
            .conversion_context(Role::ConversionService, ms(999))
            .unwrap();
        ctx.decrypt_aggregate(e.backend(), e.he_keyset(), cipher, "test_probe", ms(999))
            .unwrap()[0]
    }

    mod election {
        use super::*;

        #[test]
        fn single_candidate_is_always_elected() {
            let group = vec!["only".to_string()];
            for epoch in 0..10 {
                assert_eq!(elect_reuse_intermediary(&group, epoch, 7).unwrap(), "only");
            }
        }

        #[test]
        fn empty_group_is_rejected() {
            assert_eq!(
                elect_reuse_intermediary(&[], 0, 7),
                Err(ReuseError::EmptyGroup)
            );
        }

        #[test]
        fn deterministic_under_epoch_and_seed() {
            let group: Vec<PartyId> = (0..4).map(|i| format!("g{i}")).collect();
            for epoch in 0..50 {
                let a = elect_reuse_intermediary(&group, epoch, 42).unwrap();
                let b = elect_reuse_intermediary(&group, epoch, 42).unwrap();
                assert_eq!(a, b);
            }
            // A different seed or epoch must be able to change the outcome.
            let picks: std::collections::BTreeSet<PartyId> = (0..50)
                .map(|epoch| elect_reuse_intermediary(&group, epoch, 42).unwrap())
                .collect();
            assert!(picks.len() > 1);
        }

        #[test]
        fn election_frequencies_pass_a_chi_squared_uniformity_check() {
            let group: Vec<PartyId> = (0..4).map(|i| format!("g{i}")).collect();
            let mut counts = BTreeMap::new();
            let trials = 400u64;
            for epoch in 0..trials {
                let g = elect_reuse_intermediary(&group, epoch, 1234).unwrap();
                *counts.entry(g).or_insert(0u64) += 1;
            }
            let expected = trials as f64 / group.len() as f64;
            let chi2: f64 = group
                .iter()
                .map(|g| {
                    let obs = *counts.get(g).unwrap_or(&0) as f64;
                    (obs - expected).powi(2) / expected
                })
                .sum();
            // 3 degrees of freedom, alpha = 0.01.
            assert!(chi2 < 11.345, "chi2 = {chi2}, counts = {counts:?}");
        }
    }

    mod summarize {
        use super::*;

        #[test]
        fn groups_shared_initiator_entries_and_folds_per_receiver() {
            let mut e = engine(HeBackendKind::Mock, 1.0);
            pool_one(&mut e, "O1", "D1", "10");
            pool_one(&mut e, "O1", "D2", "2");
            pool_one(&mut e, "O1", "D3", "3");
            pool_one(&mut e, "O1", "D1", "5");
            let group = e.intermediary_names();

            let temp = ckpoe_summarize(&e, &group, "g1", 0, ms(50)).unwrap();
            assert_eq!(temp.pool_before, 4);
            assert_eq!(temp.merged.len(), 1);
            let m = &temp.merged[0];
            assert_eq!((m.intermediary.as_str(), m.initiator.as_str()), ("g1", "O1"));
            assert_eq!(
                m.payload.keys().cloned().collect::<Vec<_>>(),
                vec!["D1", "D2", "D3"]
            );
            assert_eq!(m.members.len(), 4);
            // Two D1 transfers folded into one ciphertext: 10 + 5.
            assert_eq!(decode_slot0(&e, &m.payload["D1"]), 15.0);
            assert_eq!(decode_slot0(&e, &m.payload["D2"]), 2.0);
            assert_eq!(decode_slot0(&e, &m.payload["D3"]), 3.0);
        }

        #[test]
        fn random_pools_match_a_group_by_sum_oracle() {
            use rand::Rng;
            let mut e = engine(HeBackendKind::Mock, 1.0);
            let mut rng = crate::acceptance::gen::rng(55);
            let mut oracle: BTreeMap<(String, String), Amount> = BTreeMap::new();
            for _ in 0..30 {
                let from = format!("O{}", rng.gen_range(1..=3));
                let to = format!("D{}", rng.gen_range(1..=4));
                let amount = Amount::from_units(rng.gen_range(1..=50_000_000));
                pool_one(&mut e, &from, &to, &amount.to_canonical_string());
                *oracle.entry((from, to)).or_insert(Amount::ZERO) += amount;
            }
            let group = e.intermediary_names();
            let temp = ckpoe_summarize(&e, &group, "g1", 0, ms(50)).unwrap();
            let mut total_members = 0;
            for m in &temp.merged {
                total_members += m.members.len();
                for (receiver, cipher) in &m.payload {
                    let want = oracle[&(m.initiator.clone(), receiver.clone())];
                    assert_eq!(decode_slot0(&e, cipher), want.to_f64());
                }
            }
            assert_eq!(total_members, 30);
        }

        #[test]
        fn empty_pool_summarizes_to_an_empty_temp_pool() {
            let e = engine(HeBackendKind::Mock, 1.0);
            let group = e.intermediary_names();
            let temp = ckpoe_summarize(&e, &group, "g1", 0, ms(50)).unwrap();
            assert!(temp.merged.is_empty());
            assert_eq!(temp.pool_before, 0);
        }
    }

    mod regenerate {
        use super::*;

        #[test]
        fn shrinks_the_pool_to_distinct_pairs() {
            let mut e = engine(HeBackendKind::Mock, 1.0);
            pool_one(&mut e, "O1", "D1", "10");
            pool_one(&mut e, "O1", "D2", "2");
            pool_one(&mut e, "O1", "D3", "3");
            pool_one(&mut e, "O1", "D1", "5");
            let group = e.intermediary_names();

            let audit = run_reuse_epoch(&mut e, &group, 0, 7, ms(50)).unwrap();
            assert_eq!((audit.pool_before, audit.pool_after), (4, 1));
            assert_eq!(e.pool_len("g1"), 1);
            assert_eq!(e.pool_members("g1"), 4);
            // The merged entry is a live ledger row; the four originals are
            // tombstoned.
            let hits = e
                .shard_state(0)
                .get_state_by_partial_composite_key("cstxm", &["g1"])
                .unwrap();
            assert_eq!(hits.len(), 1);
            assert_eq!(hits[0].value, MERGED_VALUE);
            assert!(e
                .shard_state(0)
                .get_state_by_partial_composite_key("cstx", &["g1"])
                .unwrap()
                .is_empty());
        }

        #[test]
        fn stale_snapshot_is_rejected_and_retry_succeeds() {
            let mut e = engine(HeBackendKind::Mock, 1.0);
            pool_one(&mut e, "O1", "D1", "10");
            let group = e.intermediary_names();
            let temp = ckpoe_summarize(&e, &group, "g1", 0, ms(50)).unwrap();
            // The pool moves on before regeneration lands.
            pool_one(&mut e, "O2", "D2", "4");
            assert_eq!(
                ckpoe_regenerate(&mut e, &group, temp).unwrap_err(),
                ReuseError::StaleSnapshot
            );
            assert_eq!(e.pool_len("g1"), 2, "a stale epoch must not touch the pool");
            // Next epoch re-summarizes the grown pool and applies cleanly.
            let audit = run_reuse_epoch(&mut e, &group, 1, 7, ms(60)).unwrap();
            assert_eq!((audit.pool_before, audit.pool_after), (2, 2));
        }

        #[test]
        fn reuse_is_idempotent_on_a_quiescent_pool() {
            let mut e = engine(HeBackendKind::Mock, 1.0);
            pool_one(&mut e, "O1", "D1", "10");
            pool_one(&mut e, "O1", "D2", "2");
            pool_one(&mut e, "O2", "D1", "3");
            let group = e.intermediary_names();

            let first = run_reuse_epoch(&mut e, &group, 0, 7, ms(50)).unwrap();
            let keys_after_first: Vec<String> =
                e.pool_slots().keys().cloned().collect();
            let second = run_reuse_epoch(&mut e, &group, 1, 7, ms(60)).unwrap();
            let keys_after_second: Vec<String> =
                e.pool_slots().keys().cloned().collect();
            assert_eq!(keys_after_first, keys_after_second);
            assert_eq!(first.digest, second.digest);
            assert_eq!(second.pool_before, second.pool_after);
        }

        #[test]
        fn empty_pool_regenerates_to_an_empty_pool() {
            let mut e = engine(HeBackendKind::Mock, 1.0);
            let group = e.intermediary_names();
            let audit = run_reuse_epoch(&mut e, &group, 0, 7, ms(50)).unwrap();
            assert_eq!((audit.pool_before, audit.pool_after), (0, 0));
            assert_eq!(e.pool_len("g1"), 0);
        }

        #[test]
        fn audit_lines_carry_the_epoch_trail() {
            let mut e = engine(HeBackendKind::Mock, 1.0);
            pool_one(&mut e, "O1", "D1", "10");
            pool_one(&mut e, "O2", "D1", "5");
            let group = e.intermediary_names();
            run_reuse_epoch(&mut e, &group, 3, 99, ms(50)).unwrap();

            let audits = e.reuse_audits();
            assert_eq!(audits.len(), 1);
            let line: serde_json::Value =
                serde_json::from_str(&e.reuse_audit_jsonl()).unwrap();
            assert_eq!(line["epoch"], 3);
            assert_eq!(line["pool_before"], 2);
            assert_eq!(line["pool_after"], 2);
            assert_eq!(line["digest"].as_str().unwrap().len(), 64);
            assert_eq!(
                line["elected"],
                elect_reuse_intermediary(&group, 3, 99).unwrap()
            );
        }
    }

    mod settlement_equivalence {
        use super::*;

        /// Same workload on two engines; one compacts its pool first. Mock
        /// backend: everything must match exactly.
        #[test]
        fn reused_pool_settles_identically_on_the_exact_backend() {
            let load: &[(&str, &str, &str)] = &[
                ("O1", "D1", "10.50"),
                ("O1", "D2", "2.25"),
                ("O2", "D1", "3.125"),
                ("O1", "D1", "5.0"),
                ("O3", "D4", "7.777777"),
            ];
            let mut plain = engine(HeBackendKind::Mock, 1.37);
            let mut reused = engine(HeBackendKind::Mock, 1.37);
            for (from, to, amount) in load {
                pool_one(&mut plain, from, to, amount);
                pool_one(&mut reused, from, to, amount);
            }
            let group = reused.intermediary_names();
            let audit = run_reuse_epoch(&mut reused, &group, 0, 7, ms(50)).unwrap();
            assert_eq!(audit.pool_after, 3);

            let a = plain.settle("g1", ms(200)).unwrap();
            let b = reused.settle("g1", ms(200)).unwrap();
            assert_eq!(a.credits, b.credits);
            assert_eq!(a.out_exact, b.out_exact);
            assert_eq!(a.in_exact, b.in_exact);
            assert_eq!(a.result.out_amount, b.result.out_amount);
            assert_eq!(a.result.in_amount, b.result.in_amount);
            assert_eq!(a.n_txs, b.n_txs);
            // Fewer pool entries means a cheaper fuzzy query.
            assert!(b.entries_scanned < a.entries_scanned);
            for d in ["D1", "D2", "D3", "D4"] {
                let key = CrossShardEngine::account_key(d);
                assert_eq!(
                    plain.shard_state(1).balance_of(&key).unwrap(),
                    reused.shard_state(1).balance_of(&key).unwrap()
                );
            }
        }

        #[test]
        fn reused_pool_credits_match_exactly_even_with_backend_noise() {
            use rand::Rng;
            let mut plain = engine(HeBackendKind::Approximate, 0.83);
            let mut reused = engine(HeBackendKind::Approximate, 0.83);
            let mut rng = crate::acceptance::gen::rng(77);
            for _ in 0..25 {
                let from = format!("O{}", rng.gen_range(1..=3));
                let to = format!("D{}", rng.gen_range(1..=4));
                let amount = Amount::from_units(rng.gen_range(1..=90_000_000));
                pool_one(&mut plain, &from, &to, &amount.to_canonical_string());
                pool_one(&mut reused, &from, &to, &amount.to_canonical_string());
            }
            let group = reused.intermediary_names();
            run_reuse_epoch(&mut reused, &group, 0, 7, ms(50)).unwrap();

            let a = plain.settle("g1", ms(200)).unwrap();
            let b = reused.settle("g1", ms(200)).unwrap();
            // Exact bookkeeping is noise-free: credits agree to the unit.
            assert_eq!(a.credits, b.credits);
            assert_eq!(a.out_exact, b.out_exact);
            // Decoded audit aggregates agree within the advertised bound.
            let bound = plain.backend().relative_error_bound();
            let rel = crate::acceptance::oracles::relative_error;
            assert!(rel(b.result.out_amount, a.result.out_amount) <= 2.0 * bound);
            assert!(rel(b.result.in_amount, a.result.in_amount) <= 2.0 * bound);
        }

        #[test]
        fn merged_member_rollback_subtracts_under_ciphertext() {
            let mut e = engine(HeBackendKind::Mock, 1.0);
            let baseline = e.conservation_totals();
            let doomed = pool_one(&mut e, "O1", "D1", "10");
            pool_one(&mut e, "O1", "D1", "5");
            pool_one(&mut e, "O1", "D2", "7");
            let group = e.intermediary_names();
            run_reuse_epoch(&mut e, &group, 0, 7, ms(50)).unwrap();
            assert_eq!(e.pool_len("g1"), 1);

            let rolled = e.rollback(doomed, ms(60)).unwrap();
            assert_eq!(rolled, vec![doomed]);
            assert_eq!(e.pool_members("g1"), 2);
            let key = CrossShardEngine::account_key("O1");
            assert_eq!(e.shard_state(0).balance_of(&key).unwrap(), amt("488"));

            let report = e.settle("g1", ms(200)).unwrap();
            assert_eq!(report.result.out_amount, 12.0);
            assert_eq!(
                report.credits,
                vec![("D1".into(), amt("5")), ("D2".into(), amt("7"))]
            );
            assert_eq!(e.conservation_totals(), baseline);
        }
    }
}
