//! Naive reference implementations the production code is tested against.
//!
//! Everything here favors obviousness over speed: plain maps, linear scans,
//! and longhand integer arithmetic. None of it calls into the modules it
//! exists to check, so a bug would have to be made twice, independently, to
//! slip through.

use std::collections::BTreeMap;

use crate::amount::{Amount, Rate, UNITS_PER_WHOLE};
use crate::clock::SimTime;
use crate::ledger::{Block, Verdict, VersionedWorldState};

/// Replay a block's transactions serially against a plain version map and
/// return the expected verdicts. A transaction commits iff every read's
/// observed version equals the map's current version; its writes then bump
/// versions (new keys start at 0) before the next transaction is checked.
pub fn serial_commit_oracle(
    initial_versions: &BTreeMap<String, u64>,
    block: &Block,
) -> Vec<Verdict> {
    let mut versions = initial_versions.clone();
    let mut verdicts = Vec::with_capacity(block.txs.len());
    for tx in &block.txs {
        let clean = tx
            .rwset
            .reads
            .iter()
            .all(|(key, ver)| versions.get(key).copied() == *ver);
        if clean {
            for (key, _) in &tx.rwset.writes {
                versions
                    .entry(key.clone())
                    .and_modify(|v| *v += 1)
                    .or_insert(0);
            }
            verdicts.push(Verdict::Valid);
        } else {
            verdicts.push(Verdict::MvccConflict);
        }
    }
    verdicts
}

/// Expected block boundaries for an arrival-sorted stream of (arrival,
/// byte_size) pairs: prefix-sum the sizes, close when the next transaction
/// would exceed the limit or when the window (opened at its first
/// transaction) times out. Returns the transaction count per block.
pub fn block_boundary_oracle(
    arrivals: &[(SimTime, u64)],
    block_size_limit: u64,
    batch_timeout: SimTime,
) -> Vec<usize> {
    let mut blocks = Vec::new();
    let mut window: Vec<usize> = Vec::new();
    let mut window_bytes = 0u64;
    let mut window_open = SimTime::ZERO;
    for (i, &(at, size)) in arrivals.iter().enumerate() {
        // `>=`: an arrival exactly at the deadline opens the next window.
        if !window.is_empty() && at >= window_open + batch_timeout {
            blocks.push(window.len());
            window.clear();
            window_bytes = 0;
        }
        if !window.is_empty() && window_bytes + size > block_size_limit {
            blocks.push(window.len());
            window.clear();
            window_bytes = 0;
        }
        if window.is_empty() {
            window_open = at;
        }
        window.push(i);
        window_bytes += size;
    }
    if !window.is_empty() {
        blocks.push(window.len());
    }
    blocks
}

/// Linear-scan filter for partial composite-key queries: split every live
/// key by the raw separator, unescape longhand, and keep keys whose prefix
/// and leading attributes match. Returns rendered keys in sorted order.
pub fn partial_query_oracle(
    stored: &[(String, bool)],
    prefix: &str,
    leading_attrs: &[String],
) -> Vec<String> {
    let mut hits = Vec::new();
    for (rendered, live) in stored {
        if !live {
            continue;
        }
        let Some((got_prefix, attrs)) = naive_split(rendered) else {
            continue;
        };
        if got_prefix == prefix
            && attrs.len() >= leading_attrs.len()
            && attrs[..leading_attrs.len()] == *leading_attrs
        {
            hits.push(rendered.clone());
        }
    }
    hits.sort();
    hits
}

fn naive_split(rendered: &str) -> Option<(String, Vec<String>)> {
    let mut segments = Vec::new();
    for seg in rendered.as_bytes().split(|&b| b == 0x00) {
        let mut out = Vec::new();
        let mut i = 0;
        while i < seg.len() {
            if seg[i] == 0x01 {
                match seg.get(i + 1) {
                    Some(0x01) => out.push(0x01),
                    Some(0x02) => out.push(0x00),
                    _ => return None,
                }
                i += 2;
            } else {
                out.push(seg[i]);
                i += 1;
            }
        }
        if out.is_empty() {
            return None;
        }
        segments.push(String::from_utf8(out).ok()?);
    }
    if segments.len() < 2 {
        return None;
    }
    let prefix = segments.remove(0);
    Some((prefix, segments))
}

/// Exact per-receiver credits for a set of pending transfers: sum the
/// fixed-point units per receiver, then apply the rate with half-away-from-
/// zero rounding, all in longhand i128 arithmetic.
pub fn exact_credit_oracle(
    transfers: &[(String, Amount)],
    rate: Rate,
) -> BTreeMap<String, Amount> {
    let mut sums: BTreeMap<String, i128> = BTreeMap::new();
    for (receiver, amount) in transfers {
        *sums.entry(receiver.clone()).or_insert(0) += amount.units();
    }
    sums.into_iter()
        .map(|(receiver, units)| {
            let product = units * rate.units();
            let half = UNITS_PER_WHOLE / 2;
            let credited = if product >= 0 {
                (product + half) / UNITS_PER_WHOLE
            } else {
                (product - half) / UNITS_PER_WHOLE
            };
            (receiver, Amount::from_units(credited))
        })
        .collect()
}

/// The two aggregates a settlement decodes, recomputed exactly: the escrow
/// total in source units and the rate-converted total, both reduced to f64
/// the same way an exact backend's decoder reduces integer slots.
pub fn exact_settlement_sums(amounts: &[Amount], rate: Rate) -> (f64, f64) {
    let sum_units: i128 = amounts.iter().map(|a| a.units()).sum();
    let out_amount = sum_units as f64 / UNITS_PER_WHOLE as f64;
    let product = sum_units * rate.units();
    let in_amount = product as f64 / (UNITS_PER_WHOLE * UNITS_PER_WHOLE) as f64;
    (out_amount, in_amount)
}

/// |got - want| / |want|, with a floor to avoid dividing by zero.
pub fn relative_error(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
}

/// Worst-case gap between the exactly-credited total and a decoded
/// settlement aggregate: one rounding ulp per receiver plus the backend's
/// advertised relative error on the aggregate itself.
pub fn settlement_residue_bound(
    n_receivers: usize,
    in_amount: f64,
    backend_relative_bound: f64,
) -> f64 {
    let ulp = 1.0 / UNITS_PER_WHOLE as f64;
    n_receivers as f64 * ulp + backend_relative_bound * in_amount.abs()
}

/// Sum every live value that parses as a canonical decimal over keys
/// accepted by `key_filter`. Used for conservation checks; escrowed amounts
/// are tracked separately by the auditor.
pub fn sum_balances(state: &VersionedWorldState, key_filter: impl Fn(&str) -> bool) -> Amount {
    let mut total = Amount::ZERO;
    for (key, entry) in state.iter() {
        if !key_filter(key) {
            continue;
        }
        if let Some(value) = entry.value.as_deref() {
            if let Ok(amount) = value.parse::<Amount>() {
                total += amount;
            }
        }
    }
    total
}
