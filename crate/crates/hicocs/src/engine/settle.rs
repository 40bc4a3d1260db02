//! Settlement and rollback for pooled cross-shard transfers.
//!
//! Settlement runs in three phases mirroring the conversion pipeline:
//!
//! 1. `accumulate`: fuzzy partial-key query over the intermediary's virtual
//!    sub-broker entries, conversion of the transport ciphertexts into the
//!    homomorphic domain, and a rotate-and-add inner sum producing `C_sum`.
//! 2. `synchronize`: multiply by the encrypted exchange rate to get
//!    `C_finalSum` and decode both aggregates for the audit record.
//! 3. `complete`: move the exact fixed-point value. The consumed sub-broker
//!    keys are tombstoned, the intermediary's source-side account absorbs
//!    the escrow, each receiver is credited `amount × rate` from the
//!    intermediary's target-side funds, and the transfers turn COMPLETED.
//!
//! `settle` glues the phases together and treats an empty pool as a no-op.
//! Completion is gated on the intermediary's target-side liquidity: if it
//! cannot fund today's credits, nothing moves and the pool carries over to
//! the next period.

use std::collections::BTreeMap;

use crate::amount::Amount;
use crate::clock::SimTime;
use crate::crypto::{CipherVector, Role};
use crate::ledger::LedgerError;

use super::{
    CrossShardEngine, CstxStatus, EngineError, PendingItem, PendingSource, PendingTransferSet,
    PoolSlot, SettlementAudit, SettlementReport, SettlementResult, TxUid,
};

/// Output of the accumulate phase: the pending set, its ciphertext sum, and
/// the bookkeeping needed to finish or retry the settlement.
pub struct Accumulation {
    pub pending: PendingTransferSet,
    pub c_sum: CipherVector,
    /// Ledger entries touched by the fuzzy pool queries.
    pub entries_scanned: u64,
    /// Rendered composite keys to tombstone on completion.
    pub consumed_keys: Vec<String>,
}

impl CrossShardEngine {
    /// Phase 1: collect the intermediary's pooled entries and sum their
    /// amounts under ciphertext. Pooled transfers move to ACCUMULATED.
    ///
    /// Errors with `EmptyPool` when the intermediary has nothing pooled.
    pub fn accumulate(&mut self, g: &str, now: SimTime) -> Result<Accumulation, EngineError> {
        let inter = self.intermediary(g)?.clone();
        let state = &self.shard_by(inter.source_shard).state;
        let scanned_before = state.stats().entries_scanned;
        let raw_hits = state
            .get_state_by_partial_composite_key("cstx", &[g])
            .map_err(LedgerError::from)?;
        let merged_hits = state
            .get_state_by_partial_composite_key("cstxm", &[g])
            .map_err(LedgerError::from)?;
        let entries_scanned = state.stats().entries_scanned - scanned_before;

        let mut items = Vec::new();
        let mut consumed_keys = Vec::new();
        let mut raw_batch: Vec<(String, crate::crypto::AmountCipher)> = Vec::new();
        let mut touched: Vec<TxUid> = Vec::new();

        for hit in &raw_hits {
            let rendered = &hit.record.rendered;
            let Some(PoolSlot::Raw { uid }) = self.pool.get(rendered) else {
                debug_assert!(false, "ledger pool entry without engine slot: {rendered:?}");
                continue;
            };
            let tx = &self.txs[*uid as usize];
            items.push(PendingItem {
                receiver: tx.receiver.clone(),
                source: PendingSource::Raw {
                    owner: tx.initiator.clone(),
                    cipher: tx.cipher.clone(),
                    uid: *uid,
                },
            });
            raw_batch.push((tx.initiator.clone(), tx.cipher.clone()));
            touched.push(*uid);
            consumed_keys.push(rendered.clone());
        }

        let mut merged_vectors: Vec<CipherVector> = Vec::new();
        for hit in &merged_hits {
            let rendered = &hit.record.rendered;
            let Some(PoolSlot::Merged { payload, members, .. }) = self.pool.get(rendered) else {
                debug_assert!(false, "ledger merged entry without engine slot: {rendered:?}");
                continue;
            };
            for (receiver, cipher) in payload {
                let uids: Vec<TxUid> = members
                    .iter()
                    .filter(|m| &m.receiver == receiver)
                    .map(|m| m.uid)
                    .collect();
                debug_assert!(!uids.is_empty(), "merged payload with no members");
                items.push(PendingItem {
                    receiver: receiver.clone(),
                    source: PendingSource::Merged {
                        cipher: cipher.clone(),
                        uids: uids.clone(),
                    },
                });
                touched.extend(uids);
                merged_vectors.push(cipher.clone());
            }
            consumed_keys.push(rendered.clone());
        }

        if items.is_empty() {
            return Err(EngineError::EmptyPool(g.to_string()));
        }

        // Sum everything under ciphertext: convert the raw transport
        // ciphertexts slot-count entries at a time, inner-sum each chunk,
        // then add the merged accumulators (their value sits in slot 0).
        let ctx = self
            .store
            .conversion_context(Role::ConversionService, now)?;
        let n = self.backend.params().slot_count;
        let mut c_sum: Option<CipherVector> = None;
        for chunk in raw_batch.chunks(n) {
            let converted = ctx.convert(&self.backend, &self.keyset, chunk, now)?;
            let folded = self
                .backend
                .he_inner_sum(&converted, chunk.len(), n, &self.keyset)?;
            c_sum = Some(match c_sum {
                None => folded,
                Some(acc) => self.backend.he_add(&acc, &folded)?,
            });
        }
        for v in merged_vectors {
            c_sum = Some(match c_sum {
                None => v,
                Some(acc) => self.backend.he_add(&acc, &v)?,
            });
        }
        let c_sum = c_sum.expect("non-empty pool yields a sum");

        for uid in touched {
            if self.txs[uid as usize].status == CstxStatus::Pooled {
                self.transition(uid, CstxStatus::Accumulated, now);
            }
        }

        Ok(Accumulation {
            pending: PendingTransferSet {
                intermediary: g.to_string(),
                items,
            },
            c_sum,
            entries_scanned,
            consumed_keys,
        })
    }

    /// Phase 2: apply the encrypted rate and decode both aggregates.
    /// Decoding happens inside the conversion service; the decoded numbers
    /// are audit values, recorded as aggregate exposures.
    pub fn synchronize(
        &self,
        acc: &Accumulation,
        now: SimTime,
    ) -> Result<SettlementResult, EngineError> {
        let c_final_sum = self
            .backend
            .he_mul(&acc.c_sum, &self.c_rate, &self.keyset)?;
        let ctx = self
            .store
            .conversion_context(Role::ConversionService, now)?;
        let out_amount = ctx
            .decrypt_aggregate(&self.backend, &self.keyset, &acc.c_sum, "synchronize_out", now)?
            [0];
        let in_amount = ctx
            .decrypt_aggregate(&self.backend, &self.keyset, &c_final_sum, "synchronize_in", now)?
            [0];
        Ok(SettlementResult {
            c_sum: acc.c_sum.clone(),
            c_final_sum,
            out_amount,
            in_amount,
            rate: self.cfg.rate,
        })
    }

    /// Phase 3: move the exact value. Fails closed on a liquidity shortfall:
    /// the pool entries stay in place (still ACCUMULATED) and retry at the
    /// next period.
    pub fn complete(
        &mut self,
        acc: Accumulation,
        result: SettlementResult,
        now: SimTime,
    ) -> Result<SettlementReport, EngineError> {
        let g = acc.pending.intermediary.clone();
        let inter = self.intermediary(&g)?.clone();
        let n_txs = acc.pending.tx_count();

        // Exact totals from the transport layer (raw entries) and the
        // conversion-time registry (merged entries). Each receiver's
        // transfers are summed first and the rate applied once to the sum,
        // so merging entries between settlements cannot change any credit.
        let mut out_exact = Amount::ZERO;
        let mut recv_sums: BTreeMap<String, Amount> = BTreeMap::new();
        let mut completed: Vec<TxUid> = Vec::new();
        let ctx = self
            .store
            .conversion_context(Role::ConversionService, now)?;
        for item in &acc.pending.items {
            match &item.source {
                PendingSource::Raw { owner, cipher, uid } => {
                    let (sealed, _ts) = ctx.decrypt_transport(owner, cipher, now)?;
                    let amount = sealed.reveal(&self.store, Role::ConversionService, "complete", now)?;
                    debug_assert_eq!(amount, self.txs[*uid as usize].amount);
                    out_exact += amount;
                    *recv_sums.entry(item.receiver.clone()).or_insert(Amount::ZERO) += amount;
                    completed.push(*uid);
                }
                PendingSource::Merged { uids, .. } => {
                    for uid in uids {
                        let amount = self.txs[*uid as usize].amount;
                        out_exact += amount;
                        *recv_sums.entry(item.receiver.clone()).or_insert(Amount::ZERO) += amount;
                        completed.push(*uid);
                    }
                }
            }
        }
        let credits: BTreeMap<String, Amount> = recv_sums
            .into_iter()
            .map(|(r, sum)| (r, sum.mul_rate(self.cfg.rate).expect("bounded amounts")))
            .collect();
        let in_exact: Amount = credits.values().copied().sum();

        // One half-unit rounding per receiver, so the totals can only
        // disagree by that many units.
        let residue = (in_exact - out_exact.mul_rate(self.cfg.rate).expect("bounded amounts")).abs();
        let bound = Amount::from_units(credits.len() as i128 + 1);
        if residue > bound {
            return Err(EngineError::RoundingResidue { residue, bound });
        }

        let g_key = Self::account_key(&g);
        let target_liquidity = self
            .shard_by(inter.target_shard)
            .state
            .balance_of(&g_key)
            .map_err(|e| EngineError::Ledger(e.into()))?;
        if target_liquidity < in_exact {
            return Err(EngineError::LiquidityShortfall {
                intermediary: g,
                available: target_liquidity,
                needed: in_exact,
            });
        }

        // Source shard: release the escrow into the intermediary's account
        // and tombstone the consumed sub-broker keys.
        let src = &mut self.shards[inter.source_shard];
        let g_src_balance = src.state.balance_of(&g_key).expect("intermediary is seeded");
        let mut src_writes: Vec<(String, Option<String>)> = acc
            .consumed_keys
            .iter()
            .map(|k| (k.clone(), None))
            .collect();
        src_writes.push((
            g_key.clone(),
            Some((g_src_balance + out_exact).to_canonical_string()),
        ));
        src.state.apply_system_writes(&src_writes);
        src.escrow -= out_exact;

        // Target shard: pay each receiver out of the intermediary's funds.
        let dst = &mut self.shards[inter.target_shard];
        let mut dst_writes: Vec<(String, Option<String>)> = Vec::new();
        for (receiver, credit) in &credits {
            let key = Self::account_key(receiver);
            let balance = dst.state.balance_of(&key).expect("receiver is seeded");
            dst_writes.push((key, Some((balance + *credit).to_canonical_string())));
        }
        dst_writes.push((
            g_key,
            Some((target_liquidity - in_exact).to_canonical_string()),
        ));
        dst.state.apply_system_writes(&dst_writes);

        for key in &acc.consumed_keys {
            self.pool.remove(key);
        }
        for &uid in &completed {
            self.transition(uid, CstxStatus::Completed, now);
            let receiver = self.txs[uid as usize].receiver.clone();
            self.retire_flight_in(&receiver, uid);
            self.dependents.remove(&uid);
        }
        // Fresh credits may unblock transfers parked on these receivers.
        for receiver in credits.keys().cloned().collect::<Vec<_>>() {
            self.unpark_for(&receiver, now);
        }

        let period = *self.periods.entry(g.clone()).or_insert(0);
        self.audits.push(SettlementAudit {
            intermediary: g.clone(),
            period,
            out_amount: result.out_amount,
            in_amount: result.in_amount,
            rate: self.cfg.rate.to_f64(),
            n_txs,
        });
        *self.periods.get_mut(&g).expect("just inserted") += 1;

        let credits: Vec<(String, Amount)> = credits.into_iter().collect();
        Ok(SettlementReport {
            intermediary: g,
            period,
            n_txs,
            result,
            pending: acc.pending,
            out_exact,
            in_exact,
            credits,
            entries_scanned: acc.entries_scanned,
            completed,
        })
    }

    /// Run one settlement for an intermediary: accumulate, synchronize,
    /// complete. An empty pool settles vacuously (no ledger change, no
    /// audit record, period unchanged).
    pub fn settle(&mut self, g: &str, now: SimTime) -> Result<SettlementReport, EngineError> {
        let acc = match self.accumulate(g, now) {
            Ok(acc) => acc,
            Err(EngineError::EmptyPool(_)) => {
                return Ok(SettlementReport {
                    intermediary: g.to_string(),
                    period: self.periods.get(g).copied().unwrap_or(0),
                    n_txs: 0,
                    result: SettlementResult {
                        c_sum: self.backend.zero_cipher(&self.keyset),
                        c_final_sum: self.backend.zero_cipher(&self.keyset),
                        out_amount: 0.0,
                        in_amount: 0.0,
                        rate: self.cfg.rate,
                    },
                    pending: PendingTransferSet {
                        intermediary: g.to_string(),
                        items: Vec::new(),
                    },
                    out_exact: Amount::ZERO,
                    in_exact: Amount::ZERO,
                    credits: Vec::new(),
                    entries_scanned: 0,
                    completed: Vec::new(),
                });
            }
            Err(e) => return Err(e),
        };
        let result = self.synchronize(&acc, now)?;
        self.complete(acc, result, now)
    }

    /// Roll a transfer back to ROLLED_BACK, refunding any committed escrow,
    /// and sweep transfers whose admission depended on it. Returns every
    /// uid that rolled back, the requested one first.
    ///
    /// Completed transfers cannot roll back. Rolling back an already
    /// rolled-back transfer is a no-op.
    pub fn rollback(&mut self, uid: TxUid, now: SimTime) -> Result<Vec<TxUid>, EngineError> {
        match self.tx(uid)?.status {
            CstxStatus::Completed => return Err(EngineError::AlreadyCompleted(uid)),
            CstxStatus::RolledBack => return Ok(Vec::new()),
            _ => {}
        }
        let mut rolled = Vec::new();
        let mut work = vec![uid];
        while let Some(u) = work.pop() {
            if u != uid {
                // Cascade candidate: re-check solvency at processing time;
                // earlier sweeps may have refunded its initiator already.
                let tx = &self.txs[u as usize];
                if tx.status != CstxStatus::Initiated || !self.is_parked(u) {
                    continue;
                }
                let (initiator, amount) = (tx.initiator.clone(), tx.amount);
                let base = self.admission_base(&initiator, Some(u))?;
                if base >= amount {
                    self.remove_parked(u);
                    self.simulate_and_offer(u, now)?;
                    continue;
                }
                if base + self.surviving_credit(u) >= amount {
                    continue;
                }
            }
            self.tear_down(u, now)?;
            rolled.push(u);
            for d in self.dependents.remove(&u).unwrap_or_default() {
                if !work.contains(&d) {
                    work.push(d);
                }
            }
            let initiator = self.txs[u as usize].initiator.clone();
            self.unpark_for(&initiator, now);
        }
        Ok(rolled)
    }

    /// Undo one transfer's footprint and mark it ROLLED_BACK.
    fn tear_down(&mut self, uid: TxUid, now: SimTime) -> Result<(), EngineError> {
        let tx = self.txs[uid as usize].clone();
        match tx.status {
            CstxStatus::Initiated => {
                if self.is_parked(uid) {
                    self.remove_parked(uid);
                    self.retire_flight_out(&tx.initiator, uid);
                } else if !tx.admitted {
                    // Never preprocessed: nothing reserved.
                } else {
                    // Debit sits in the ordering pipeline; the reservation
                    // stays until its block lands, where the terminal
                    // status triggers an immediate escrow reversal.
                }
            }
            CstxStatus::Pooled | CstxStatus::Accumulated => {
                self.refund_pooled(&tx)?;
                self.retire_flight_in(&tx.receiver, uid);
            }
            CstxStatus::Completed | CstxStatus::RolledBack => unreachable!("checked by caller"),
        }
        self.transition(uid, CstxStatus::RolledBack, now);
        Ok(())
    }

    /// Reverse a pooled transfer's escrow: refund the initiator and either
    /// tombstone its sub-broker key or subtract it from its merged entry.
    fn refund_pooled(&mut self, tx: &super::CrossShardTx) -> Result<(), EngineError> {
        let acct = Self::account_key(&tx.initiator);
        let shard = &mut self.shards[tx.source_shard];
        let restored = shard.state.balance_of(&acct).expect("initiator is a balance") + tx.amount;

        if let Some(PoolSlot::Raw { .. }) = self.pool.get(&tx.composite_key) {
            self.pool.remove(&tx.composite_key);
            shard.state.apply_system_writes(&[
                (tx.composite_key.clone(), None),
                (acct, Some(restored.to_canonical_string())),
            ]);
            shard.escrow -= tx.amount;
            return Ok(());
        }

        // The transfer was folded into a merged entry: subtract its amount
        // from the per-receiver accumulator under ciphertext and drop it
        // from the member list.
        let merged_key = self
            .pool
            .iter()
            .find_map(|(k, slot)| match slot {
                PoolSlot::Merged { members, .. }
                    if members.iter().any(|m| m.uid == tx.uid) =>
                {
                    Some(k.clone())
                }
                _ => None,
            })
            .ok_or(EngineError::UnknownTx(tx.uid))?;
        let negative = self.backend.he_encode(&[-tx.amount])?;
        let negative = self.backend.he_encrypt(&self.keyset, &negative);
        let Some(PoolSlot::Merged { payload, members, .. }) = self.pool.get_mut(&merged_key)
        else {
            unreachable!("key found above");
        };
        members.retain(|m| m.uid != tx.uid);
        let remaining_for_receiver = members.iter().any(|m| m.receiver == tx.receiver);
        let cell = payload.get_mut(&tx.receiver).expect("member implies payload cell");
        *cell = self.backend.he_add(cell, &negative)?;
        if !remaining_for_receiver {
            payload.remove(&tx.receiver);
        }
        let now_empty = members.is_empty();
        if now_empty {
            self.pool.remove(&merged_key);
        }
        let shard = &mut self.shards[tx.source_shard];
        let mut writes = vec![(
            Self::account_key(&tx.initiator),
            Some(restored.to_canonical_string()),
        )];
        if now_empty {
            writes.push((merged_key, None));
        }
        shard.state.apply_system_writes(&writes);
        shard.escrow -= tx.amount;
        Ok(())
    }

    /// Credits still standing among a parked transfer's admission deps.
    fn surviving_credit(&self, uid: TxUid) -> Amount {
        self.txs[uid as usize]
            .deps
            .iter()
            .filter(|d| {
                matches!(
                    self.txs[**d as usize].status,
                    CstxStatus::Pooled | CstxStatus::Accumulated
                )
            })
            .map(|d| {
                self.txs[*d as usize]
                    .amount
                    .mul_rate(self.cfg.rate)
                    .expect("bounded amounts")
            })
            .sum()
    }

    fn is_parked(&self, uid: TxUid) -> bool {
        let initiator = &self.txs[uid as usize].initiator;
        self.parked
            .get(initiator)
            .is_some_and(|v| v.contains(&uid))
    }

    fn remove_parked(&mut self, uid: TxUid) {
        let initiator = self.txs[uid as usize].initiator.clone();
        if let Some(v) = self.parked.get_mut(&initiator) {
            v.retain(|u| *u != uid);
            if v.is_empty() {
                self.parked.remove(&initiator);
            }
        }
    }

    fn shard_by(&self, shard: super::ShardId) -> &super::Shard {
        &self.shards[shard]
    }
}
