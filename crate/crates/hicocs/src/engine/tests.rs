use rand::Rng;

use super::*;
use crate::acceptance::{gen, oracles};
use crate::crypto::ExposureKind;

fn amt(s: &str) -> Amount {
    s.parse().unwrap()
}

fn ms(v: u64) -> SimTime {
    SimTime::from_millis(v)
}

fn cfg(kind: HeBackendKind) -> EngineConfig {
    EngineConfig {
        backend_kind: kind,
        batch_timeout: ms(100),
        ..EngineConfig::default()
    }
}

/// Two shards bridged by g0 (0 -> 1), four funded senders on shard 0 and
/// four receivers on shard 1.
fn desk(kind: HeBackendKind) -> CrossShardEngine {
    let mut e = CrossShardEngine::new(cfg(kind), 2);
    e.add_intermediary("g0", 0, 1, Amount::from_whole(1_000), Amount::from_whole(1_000))
        .unwrap();
    for i in 1..=4 {
        e.add_account(&format!("O{i}"), 0, Amount::from_whole(100)).unwrap();
        e.add_account(&format!("D{i}"), 1, Amount::from_whole(0)).unwrap();
    }
    e
}

/// Initiate + admit + commit the escrow debit, returning the pooled uid.
fn pool_one(
    e: &mut CrossShardEngine,
    from: &str,
    to: &str,
    g: &str,
    amount: &str,
    now: SimTime,
) -> TxUid {
    let uid = e.initiate_cstx(from, to, g, amt(amount), now).unwrap();
    assert_eq!(e.preprocess(uid, now).unwrap(), Admission::Submitted);
    let src = e.tx(uid).unwrap().source_shard;
    e.force_flush(src, now).unwrap();
    assert_eq!(e.status(uid).unwrap(), CstxStatus::Pooled);
    uid
}

fn balance(e: &CrossShardEngine, shard: ShardId, name: &str) -> Amount {
    e.shard_state(shard)
        .balance_of(&CrossShardEngine::account_key(name))
        .unwrap()
}

fn assert_conserved(e: &CrossShardEngine, baseline: &[Amount]) {
    assert_eq!(
        e.conservation_totals(),
        baseline,
        "per-shard balance + escrow totals must not drift"
    );
}

mod admission {
    use super::*;

    #[test]
    fn concurrent_transfers_through_one_intermediary_commit_without_conflicts() {
        let mut e = desk(HeBackendKind::Mock);
        let now = ms(10);
        let uids: Vec<TxUid> = (1..=4)
            .map(|i| {
                let uid = e
                    .initiate_cstx(&format!("O{i}"), &format!("D{i}"), "g0", amt("5"), now)
                    .unwrap();
                assert_eq!(e.preprocess(uid, now).unwrap(), Admission::Submitted);
                uid
            })
            .collect();
        let outcome = e.force_flush(0, now).unwrap();
        assert_eq!((outcome.committed, outcome.conflicted), (4, 0));
        assert_eq!(e.mvcc_conflicts(), 0);
        assert_eq!(e.pool_len("g0"), 4);
        for uid in uids {
            assert_eq!(e.status(uid).unwrap(), CstxStatus::Pooled);
            // The sub-broker entry is a real ledger row holding a marker,
            // not the amount.
            let tx = e.tx(uid).unwrap();
            assert_eq!(e.shard_state(0).value_of(&tx.composite_key), Some("held"));
        }
        assert_eq!(e.escrow_total(0), amt("20"));
    }

    #[test]
    fn admission_is_timestamp_ordered_per_initiator() {
        let mut e = desk(HeBackendKind::Mock);
        e.add_account("thin", 0, amt("10")).unwrap();
        let now = ms(5);
        let first = e.initiate_cstx("thin", "D1", "g0", amt("7"), now).unwrap();
        let second = e.initiate_cstx("thin", "D2", "g0", amt("7"), now).unwrap();
        assert_eq!(e.preprocess(first, now).unwrap(), Admission::Submitted);
        // 10 - 7 reserved leaves 3; the later transfer fails immediately.
        assert_eq!(
            e.preprocess(second, now).unwrap_err(),
            EngineError::InsufficientBalance {
                account: "thin".into(),
                available: amt("3"),
                needed: amt("7"),
            }
        );
        assert_eq!(e.status(second).unwrap(), CstxStatus::RolledBack);
        assert!(e.tx(second).unwrap().terminal_at.is_some());
        assert_eq!(e.status(first).unwrap(), CstxStatus::Initiated);
    }

    #[test]
    fn exactly_one_of_two_conflicting_spends_completes() {
        let mut e = desk(HeBackendKind::Mock);
        e.add_account("thin", 0, amt("10")).unwrap();
        let baseline = e.conservation_totals();
        let now = ms(5);
        let a = e.initiate_cstx("thin", "D1", "g0", amt("7"), now).unwrap();
        let b = e.initiate_cstx("thin", "D2", "g0", amt("7"), now).unwrap();
        let outcomes = [e.preprocess(a, now), e.preprocess(b, now)];
        assert_eq!(outcomes.iter().filter(|o| o.is_ok()).count(), 1);
        e.force_flush(0, now).unwrap();
        e.settle("g0", ms(200)).unwrap();
        let (completed, rolled) = e.terminal_counts();
        assert_eq!((completed, rolled), (1, 1));
        assert_eq!(balance(&e, 0, "thin"), amt("3"));
        assert_eq!(balance(&e, 1, "D1") + balance(&e, 1, "D2"), amt("7"));
        assert_conserved(&e, &baseline);
    }

    #[test]
    fn duplicate_preprocess_is_rejected() {
        let mut e = desk(HeBackendKind::Mock);
        let uid = e.initiate_cstx("O1", "D1", "g0", amt("1"), ms(1)).unwrap();
        e.preprocess(uid, ms(1)).unwrap();
        assert!(matches!(
            e.preprocess(uid, ms(1)),
            Err(EngineError::DuplicateKey(_))
        ));
    }

    #[test]
    fn initiate_validates_route_and_amount() {
        let mut e = desk(HeBackendKind::Mock);
        assert_eq!(
            e.initiate_cstx("O1", "D1", "g0", Amount::ZERO, ms(1)),
            Err(EngineError::NegativeAmount)
        );
        assert_eq!(
            e.initiate_cstx("nobody", "D1", "g0", amt("1"), ms(1)),
            Err(EngineError::UnknownAccount("nobody".into()))
        );
        assert_eq!(
            e.initiate_cstx("O1", "D1", "gX", amt("1"), ms(1)),
            Err(EngineError::UnknownIntermediary("gX".into()))
        );
        // D1 lives on shard 1; as an initiator through g0 it is on the
        // wrong side of the bridge.
        assert_eq!(
            e.initiate_cstx("D1", "O1", "g0", amt("1"), ms(1)),
            Err(EngineError::RouteMismatch {
                account: "D1".into(),
                expected: 0,
                actual: 1,
            })
        );
    }

    #[test]
    fn identical_transfers_get_distinct_sub_broker_keys() {
        let mut e = desk(HeBackendKind::Mock);
        let a = e.initiate_cstx("O1", "D1", "g0", amt("5"), ms(1)).unwrap();
        let b = e.initiate_cstx("O1", "D1", "g0", amt("5"), ms(1)).unwrap();
        let (ka, kb) = (
            e.tx(a).unwrap().composite_key.clone(),
            e.tx(b).unwrap().composite_key.clone(),
        );
        assert_ne!(ka, kb);
        e.preprocess(a, ms(1)).unwrap();
        e.preprocess(b, ms(1)).unwrap();
        // The sub-broker keys never collide, but both debits touch O1's
        // account key, so within one block only the first commits; the
        // second retries in the next window and lands cleanly.
        let outcome = e.force_flush(0, ms(1)).unwrap();
        assert_eq!((outcome.committed, outcome.conflicted), (1, 1));
        let outcome = e.force_flush(0, ms(2)).unwrap();
        assert_eq!((outcome.committed, outcome.conflicted), (1, 0));
        assert_eq!(e.pool_len("g0"), 2);
        assert_eq!(e.debit_retries(), 1);
        assert_eq!(balance(&e, 0, "O1"), amt("90"));
    }

    #[test]
    fn message_exposes_only_the_ciphertext() {
        let mut e = desk(HeBackendKind::Mock);
        let uid = e.initiate_cstx("O1", "D1", "g0", amt("9.25"), ms(3)).unwrap();
        let msg = e.message(uid).unwrap();
        assert_eq!(msg.initiator, "O1");
        assert_eq!(msg.receiver, "D1");
        assert_eq!(msg.intermediary, "g0");
        assert_eq!(msg.v_cipher_hex.len(), 32);
        assert!(!msg.v_cipher_hex.contains("9.25"));
        assert!(msg.ts > 0);
        let json = serde_json::to_string(&msg).unwrap();
        let back: CstxMessage = serde_json::from_str(&json).unwrap();
        assert_eq!(back, msg);
    }

    #[test]
    fn status_strings_follow_the_lifecycle() {
        assert_eq!(CstxStatus::Initiated.to_string(), "INITIATED");
        assert_eq!(CstxStatus::Pooled.to_string(), "POOLED");
        assert_eq!(CstxStatus::Accumulated.to_string(), "ACCUMULATED");
        assert_eq!(CstxStatus::Completed.to_string(), "COMPLETED");
        assert_eq!(CstxStatus::RolledBack.to_string(), "ROLLED_BACK");
        assert!(CstxStatus::Completed.is_terminal());
        assert!(CstxStatus::RolledBack.is_terminal());
        assert!(!CstxStatus::Pooled.is_terminal());
    }
}

mod settlement {
    use super::*;

    #[test]
    fn sums_the_pool_and_applies_the_rate() {
        let mut e = desk(HeBackendKind::Mock);
        let baseline = e.conservation_totals();
        let a = pool_one(&mut e, "O1", "D1", "g0", "2.0", ms(10));
        let b = pool_one(&mut e, "O2", "D2", "g0", "3.0", ms(10));
        let report = e.settle("g0", ms(200)).unwrap();

        assert_eq!(report.n_txs, 2);
        assert_eq!(report.out_exact, amt("5"));
        assert_eq!(report.in_exact, amt("5"));
        assert_eq!(report.result.out_amount, 5.0);
        assert_eq!(report.result.in_amount, 5.0);
        assert_eq!(report.completed.len(), 2);
        assert_eq!(e.status(a).unwrap(), CstxStatus::Completed);
        assert_eq!(e.status(b).unwrap(), CstxStatus::Completed);

        assert_eq!(balance(&e, 0, "O1"), amt("98"));
        assert_eq!(balance(&e, 0, "O2"), amt("97"));
        assert_eq!(balance(&e, 0, "g0"), amt("1005"));
        assert_eq!(balance(&e, 1, "g0"), amt("995"));
        assert_eq!(balance(&e, 1, "D1"), amt("2"));
        assert_eq!(balance(&e, 1, "D2"), amt("3"));
        assert_eq!(e.escrow_total(0), Amount::ZERO);
        assert_eq!(e.pool_len("g0"), 0);
        assert_conserved(&e, &baseline);

        let audits = e.audits();
        assert_eq!(audits.len(), 1);
        assert_eq!(audits[0].period, 0);
        assert_eq!(audits[0].n_txs, 2);
        let line: serde_json::Value = serde_json::from_str(&e.audit_jsonl()).unwrap();
        assert_eq!(line["intermediary"], "g0");
        assert_eq!(line["rate"], 1.0);
    }

    #[test]
    fn empty_pool_settles_vacuously() {
        let mut e = desk(HeBackendKind::Mock);
        let writes_before = e.shard_state(0).stats().writes;
        let report = e.settle("g0", ms(200)).unwrap();
        assert_eq!(report.n_txs, 0);
        assert_eq!(report.out_exact, Amount::ZERO);
        assert!(e.audits().is_empty());
        assert_eq!(e.shard_state(0).stats().writes, writes_before);
        // The phase itself reports the condition when called directly.
        assert_eq!(
            e.accumulate("g0", ms(200)).err(),
            Some(EngineError::EmptyPool("g0".into()))
        );
    }

    #[test]
    fn distributes_per_receiver_credits_from_intermediary_funds() {
        let mut e = CrossShardEngine::new(
            EngineConfig {
                rate: Rate::from_f64(2.0).unwrap(),
                ..cfg(HeBackendKind::Mock)
            },
            2,
        );
        e.add_intermediary("g0", 0, 1, amt("0"), amt("10")).unwrap();
        e.add_account("O1", 0, amt("50")).unwrap();
        e.add_account("D1", 1, amt("0")).unwrap();
        e.add_account("D2", 1, amt("0")).unwrap();
        let baseline = e.conservation_totals();
        pool_one(&mut e, "O1", "D1", "g0", "2.0", ms(10));
        pool_one(&mut e, "O1", "D2", "g0", "3.0", ms(10));

        let report = e.settle("g0", ms(200)).unwrap();
        assert_eq!(
            report.credits,
            vec![("D1".into(), amt("4")), ("D2".into(), amt("6"))]
        );
        assert_eq!(balance(&e, 1, "D1"), amt("4"));
        assert_eq!(balance(&e, 1, "D2"), amt("6"));
        // Credits come out of the intermediary's target-side funds, and the
        // released escrow lands on its source-side account.
        assert_eq!(balance(&e, 1, "g0"), amt("0"));
        assert_eq!(balance(&e, 0, "g0"), amt("5"));
        assert_conserved(&e, &baseline);
    }

    #[test]
    fn single_receiver_is_exact() {
        let mut e = desk(HeBackendKind::Approximate);
        pool_one(&mut e, "O1", "D1", "g0", "41.999999", ms(10));
        let report = e.settle("g0", ms(200)).unwrap();
        assert_eq!(report.in_exact, amt("41.999999"));
        assert_eq!(balance(&e, 1, "D1"), amt("41.999999"));
        // The decoded aggregate is an audit value: close, not authoritative.
        assert!(oracles::relative_error(report.result.out_amount, 41.999999) < 1e-5);
    }

    #[test]
    fn receiver_credits_group_before_the_rate_applies() {
        let mut e = CrossShardEngine::new(
            EngineConfig {
                rate: Rate::from_f64(0.5).unwrap(),
                ..cfg(HeBackendKind::Mock)
            },
            2,
        );
        e.add_intermediary("g0", 0, 1, amt("0"), amt("10")).unwrap();
        e.add_account("O1", 0, amt("1")).unwrap();
        e.add_account("D1", 1, amt("0")).unwrap();
        for _ in 0..3 {
            pool_one(&mut e, "O1", "D1", "g0", "0.000001", ms(10));
        }
        let report = e.settle("g0", ms(200)).unwrap();
        // Summed first (3 units * 0.5 rounds to 2 units), not rounded per
        // transfer (which would credit 3 units).
        let oracle = oracles::exact_credit_oracle(
            &[
                ("D1".into(), amt("0.000001")),
                ("D1".into(), amt("0.000001")),
                ("D1".into(), amt("0.000001")),
            ],
            Rate::from_f64(0.5).unwrap(),
        );
        assert_eq!(report.credits, oracle.into_iter().collect::<Vec<_>>());
        assert_eq!(balance(&e, 1, "D1"), amt("0.000002"));
    }

    #[test]
    fn liquidity_shortfall_blocks_completion_without_partial_credit() {
        let mut e = desk(HeBackendKind::Mock);
        e.add_account("faucet", 1, amt("500")).unwrap();
        e.add_intermediary("thin_g", 0, 1, amt("100"), amt("3")).unwrap();
        let baseline = e.conservation_totals();
        let uid = pool_one(&mut e, "O1", "D1", "thin_g", "10", ms(10));

        let err = e.settle("thin_g", ms(200)).unwrap_err();
        assert_eq!(
            err,
            EngineError::LiquidityShortfall {
                intermediary: "thin_g".into(),
                available: amt("3"),
                needed: amt("10"),
            }
        );
        // Nothing moved: no credit, escrow intact, pool carries over.
        assert_eq!(e.status(uid).unwrap(), CstxStatus::Accumulated);
        assert_eq!(balance(&e, 1, "D1"), Amount::ZERO);
        assert_eq!(e.escrow_total(0), amt("10"));
        assert_eq!(e.pool_len("thin_g"), 1);
        assert!(e.audits().is_empty());
        assert_conserved(&e, &baseline);

        // A liquidity top-up lets the next period complete the transfer.
        e.system_transfer(1, "faucet", "thin_g", amt("20")).unwrap();
        let report = e.settle("thin_g", ms(400)).unwrap();
        assert_eq!(report.in_exact, amt("10"));
        assert_eq!(e.status(uid).unwrap(), CstxStatus::Completed);
        assert_eq!(balance(&e, 1, "D1"), amt("10"));
        assert_conserved(&e, &baseline);
    }

    #[test]
    fn random_settlements_match_the_credit_oracle_exactly() {
        for kind in [HeBackendKind::Mock, HeBackendKind::Approximate] {
            let rate = Rate::from_f64(1.37).unwrap();
            let mut e = CrossShardEngine::new(
                EngineConfig {
                    rate,
                    ..cfg(kind)
                },
                2,
            );
            e.add_intermediary("g0", 0, 1, amt("0"), Amount::from_whole(1_000_000))
                .unwrap();
            for i in 0..6 {
                e.add_account(&format!("s{i}"), 0, Amount::from_whole(1_000_000)).unwrap();
                e.add_account(&format!("r{i}"), 1, Amount::ZERO).unwrap();
            }
            let baseline = e.conservation_totals();

            let mut rng = gen::rng(404);
            let mut transfers: Vec<(String, Amount)> = Vec::new();
            for _ in 0..300 {
                let from = format!("s{}", rng.gen_range(0..6));
                let to = format!("r{}", rng.gen_range(0..6));
                let amount = Amount::from_units(rng.gen_range(1..=100_000_000));
                pool_one(&mut e, &from, &to, "g0", &amount.to_canonical_string(), ms(10));
                transfers.push((to, amount));
            }

            let report = e.settle("g0", ms(500)).unwrap();
            let oracle = oracles::exact_credit_oracle(&transfers, rate);
            assert_eq!(report.credits, oracle.clone().into_iter().collect::<Vec<_>>());
            for (receiver, credit) in &oracle {
                assert_eq!(balance(&e, 1, receiver), *credit, "{kind:?} {receiver}");
            }
            let total: Amount = transfers.iter().map(|(_, a)| *a).sum();
            assert_eq!(report.out_exact, total);

            let (want_out, want_in) = oracles::exact_settlement_sums(
                &transfers.iter().map(|(_, a)| *a).collect::<Vec<_>>(),
                rate,
            );
            let bound = e.backend().relative_error_bound();
            assert!(oracles::relative_error(report.result.out_amount, want_out) <= bound.max(1e-12));
            assert!(oracles::relative_error(report.result.in_amount, want_in) <= bound.max(1e-12));
            assert_conserved(&e, &baseline);
        }
    }

    #[test]
    fn bulk_settlement_stays_within_the_advertised_error_bound() {
        let mut e = CrossShardEngine::new(cfg(HeBackendKind::Approximate), 2);
        e.add_intermediary("g0", 0, 1, amt("0"), Amount::from_whole(10_000_000))
            .unwrap();
        for s in 0..200 {
            e.add_account(&format!("s{s}"), 0, Amount::from_whole(10_000)).unwrap();
        }
        for i in 0..8 {
            e.add_account(&format!("r{i}"), 1, Amount::ZERO).unwrap();
        }
        let mut rng = gen::rng(88);
        let mut amounts = Vec::new();
        // Debits from one account serialize within a block, so each sender
        // contributes one transfer per window: 10 rounds of 200 senders.
        for round in 0..10u64 {
            let now = ms(10 + round);
            for s in 0..200 {
                let to = format!("r{}", rng.gen_range(0..8));
                let amount = Amount::from_units(rng.gen_range(10_000..=100_000_000));
                let uid = e
                    .initiate_cstx(&format!("s{s}"), &to, "g0", amount, now)
                    .unwrap();
                e.preprocess(uid, now).unwrap();
                amounts.push(amount);
            }
            let outcome = e.force_flush(0, now).unwrap();
            assert_eq!(outcome.conflicted, 0);
        }
        assert_eq!(e.pool_len("g0"), 2_000);

        let report = e.settle("g0", ms(500)).unwrap();
        let (want_out, _) = oracles::exact_settlement_sums(&amounts, Rate::ONE);
        assert!(
            oracles::relative_error(report.result.out_amount, want_out)
                <= e.backend().relative_error_bound()
        );
        assert_eq!(report.out_exact, amounts.iter().copied().sum::<Amount>());
        assert_eq!(report.n_txs, 2_000);
    }

    #[test]
    fn settlement_decodes_only_aggregates() {
        let mut e = desk(HeBackendKind::Mock);
        pool_one(&mut e, "O1", "D1", "g0", "2.0", ms(10));
        pool_one(&mut e, "O2", "D2", "g0", "3.0", ms(10));
        e.settle("g0", ms(200)).unwrap();
        let exposures = e.store().exposures();
        // Aggregate decodes for the audit record, per-transfer decrypts
        // only inside the conversion service at completion.
        assert!(exposures
            .iter()
            .all(|x| x.role == crate::crypto::Role::ConversionService));
        assert!(exposures
            .iter()
            .any(|x| x.kind == ExposureKind::AggregateAmount && x.site == "synchronize_out"));
        assert!(exposures
            .iter()
            .any(|x| x.kind == ExposureKind::AggregateAmount && x.site == "synchronize_in"));
    }
}

mod rollback {
    use super::*;

    #[test]
    fn refunds_a_pooled_transfer_and_tombstones_its_key() {
        let mut e = desk(HeBackendKind::Mock);
        let baseline = e.conservation_totals();
        let uid = pool_one(&mut e, "O1", "D1", "g0", "5", ms(10));
        let key = e.tx(uid).unwrap().composite_key.clone();

        let rolled = e.rollback(uid, ms(20)).unwrap();
        assert_eq!(rolled, vec![uid]);
        assert_eq!(e.status(uid).unwrap(), CstxStatus::RolledBack);
        assert_eq!(balance(&e, 0, "O1"), amt("100"));
        assert_eq!(e.escrow_total(0), Amount::ZERO);
        assert_eq!(e.shard_state(0).value_of(&key), None);
        assert_eq!(e.pool_len("g0"), 0);
        assert_conserved(&e, &baseline);

        // Idempotent; and the empty pool settles to a no-op afterwards.
        assert_eq!(e.rollback(uid, ms(21)).unwrap(), Vec::<TxUid>::new());
        assert_eq!(e.settle("g0", ms(200)).unwrap().n_txs, 0);
    }

    #[test]
    fn completed_transfers_cannot_roll_back() {
        let mut e = desk(HeBackendKind::Mock);
        let uid = pool_one(&mut e, "O1", "D1", "g0", "5", ms(10));
        e.settle("g0", ms(200)).unwrap();
        assert_eq!(e.rollback(uid, ms(300)), Err(EngineError::AlreadyCompleted(uid)));
    }

    #[test]
    fn parked_dependent_falls_with_its_funding_transfer() {
        let mut e = CrossShardEngine::new(cfg(HeBackendKind::Mock), 2);
        e.add_intermediary("g01", 0, 1, amt("100"), amt("100")).unwrap();
        e.add_intermediary("g10", 1, 0, amt("100"), amt("100")).unwrap();
        e.add_account("A", 0, amt("100")).unwrap();
        e.add_account("B", 1, amt("1")).unwrap();
        e.add_account("C", 0, amt("0")).unwrap();
        e.add_account("F", 1, amt("100")).unwrap();
        let baseline = e.conservation_totals();

        let funding = pool_one(&mut e, "A", "B", "g01", "50", ms(10));
        // B -> C leans on the unsettled 50 credit: parked, not submitted.
        let dependent = e.initiate_cstx("B", "C", "g10", amt("40"), ms(11)).unwrap();
        assert_eq!(e.preprocess(dependent, ms(11)).unwrap(), Admission::Parked);
        assert_eq!(e.parked_len(), 1);
        // An unrelated transfer through the same bridge survives the sweep.
        let bystander = pool_one(&mut e, "F", "C", "g10", "20", ms(12));

        let rolled = e.rollback(funding, ms(20)).unwrap();
        assert_eq!(rolled, vec![funding, dependent]);
        assert_eq!(e.status(dependent).unwrap(), CstxStatus::RolledBack);
        assert_eq!(e.status(bystander).unwrap(), CstxStatus::Pooled);
        assert_eq!(balance(&e, 0, "A"), amt("100"));
        assert_eq!(e.parked_len(), 0);
        assert_conserved(&e, &baseline);
    }

    #[test]
    fn dependent_with_other_surviving_credits_stays_parked_and_completes() {
        let mut e = CrossShardEngine::new(cfg(HeBackendKind::Mock), 2);
        e.add_intermediary("g01", 0, 1, amt("100"), amt("100")).unwrap();
        e.add_intermediary("g10", 1, 0, amt("100"), amt("100")).unwrap();
        e.add_account("A", 0, amt("100")).unwrap();
        e.add_account("A2", 0, amt("100")).unwrap();
        e.add_account("B", 1, amt("1")).unwrap();
        e.add_account("C", 0, amt("0")).unwrap();
        let baseline = e.conservation_totals();

        let doomed = pool_one(&mut e, "A", "B", "g01", "50", ms(10));
        let survivor = pool_one(&mut e, "A2", "B", "g01", "40", ms(10));
        let dependent = e.initiate_cstx("B", "C", "g10", amt("30"), ms(11)).unwrap();
        assert_eq!(e.preprocess(dependent, ms(11)).unwrap(), Admission::Parked);

        // 1 + 40 still covers 30 after the 50 rolls back.
        assert_eq!(e.rollback(doomed, ms(20)).unwrap(), vec![doomed]);
        assert_eq!(e.status(dependent).unwrap(), CstxStatus::Initiated);
        assert_eq!(e.parked_len(), 1);

        // The surviving credit lands; the parked transfer auto-submits.
        e.settle("g01", ms(200)).unwrap();
        assert_eq!(e.status(survivor).unwrap(), CstxStatus::Completed);
        assert_eq!(balance(&e, 1, "B"), amt("41"));
        assert_eq!(e.parked_len(), 0);
        e.force_flush(1, ms(210)).unwrap();
        assert_eq!(e.status(dependent).unwrap(), CstxStatus::Pooled);
        e.settle("g10", ms(400)).unwrap();
        assert_eq!(e.status(dependent).unwrap(), CstxStatus::Completed);
        assert_eq!(balance(&e, 0, "C"), amt("30"));
        assert_conserved(&e, &baseline);
    }

    #[test]
    fn rollback_of_a_transfer_waiting_in_the_orderer_reverses_on_commit() {
        let mut e = desk(HeBackendKind::Mock);
        let baseline = e.conservation_totals();
        let uid = e.initiate_cstx("O1", "D1", "g0", amt("5"), ms(10)).unwrap();
        assert_eq!(e.preprocess(uid, ms(10)).unwrap(), Admission::Submitted);
        // Not flushed yet: the debit sits in the ordering window.
        assert_eq!(e.rollback(uid, ms(11)).unwrap(), vec![uid]);
        assert_eq!(e.status(uid).unwrap(), CstxStatus::RolledBack);

        // The block still forms, but the committed escrow reverses at once.
        e.force_flush(0, ms(12)).unwrap();
        assert_eq!(balance(&e, 0, "O1"), amt("100"));
        assert_eq!(e.escrow_total(0), Amount::ZERO);
        assert_eq!(e.pool_len("g0"), 0);
        assert_conserved(&e, &baseline);
    }

    #[test]
    fn failed_intermediary_rolls_back_everything_it_held() {
        let mut e = desk(HeBackendKind::Mock);
        let baseline = e.conservation_totals();
        let pooled = pool_one(&mut e, "O1", "D1", "g0", "5", ms(10));
        let in_pipeline = e.initiate_cstx("O2", "D2", "g0", amt("7"), ms(11)).unwrap();
        e.preprocess(in_pipeline, ms(11)).unwrap();

        let rolled = e.fail_intermediary("g0", ms(20)).unwrap();
        assert_eq!(rolled.len(), 2);
        assert_eq!(e.status(pooled).unwrap(), CstxStatus::RolledBack);
        assert_eq!(e.status(in_pipeline).unwrap(), CstxStatus::RolledBack);
        assert!(e.all_terminal());

        e.force_flush(0, ms(21));
        assert_eq!(balance(&e, 0, "O1"), amt("100"));
        assert_eq!(balance(&e, 0, "O2"), amt("100"));
        assert_eq!(e.escrow_total(0), Amount::ZERO);
        assert_conserved(&e, &baseline);

        assert_eq!(
            e.initiate_cstx("O3", "D3", "g0", amt("1"), ms(30)),
            Err(EngineError::IntermediaryDown("g0".into()))
        );
    }

    #[test]
    fn random_rollbacks_leave_exactly_the_survivors_settled() {
        let mut e = desk(HeBackendKind::Approximate);
        let baseline = e.conservation_totals();
        let mut rng = gen::rng(2024);
        let mut uids = Vec::new();
        for i in 0..40 {
            let from = format!("O{}", (i % 4) + 1);
            let to = format!("D{}", rng.gen_range(1..=4));
            // Ten transfers per sender against a 100 balance: stay small.
            let amount = Amount::from_units(rng.gen_range(1..=2_000_000));
            uids.push(pool_one(&mut e, &from, &to, "g0", &amount.to_canonical_string(), ms(10)));
        }
        let mut survivors: Vec<(String, Amount)> = Vec::new();
        for &uid in &uids {
            if rng.gen_bool(0.4) {
                e.rollback(uid, ms(20)).unwrap();
            } else {
                let tx = e.tx(uid).unwrap();
                survivors.push((tx.receiver.clone(), tx.amount));
            }
        }
        let report = e.settle("g0", ms(300)).unwrap();
        assert_eq!(report.n_txs, survivors.len());
        let oracle = oracles::exact_credit_oracle(&survivors, Rate::ONE);
        assert_eq!(report.credits, oracle.into_iter().collect::<Vec<_>>());
        assert!(e.all_terminal());
        assert_conserved(&e, &baseline);
    }
}
