//! Deterministic workload and topology generation.
//!
//! Everything here is a pure function of the experiment config: the same
//! (config, seed) always yields the same accounts, the same transfer
//! stream, and the same arrival instants.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::amount::Amount;
use crate::clock::SimTime;
use crate::engine::ShardId;

use super::config::ExperimentConfig;
use super::HarnessError;

/// One transfer the harness will submit, scheme-independent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkloadTx {
    pub at: SimTime,
    pub from: String,
    pub to: String,
    pub intermediary: String,
    pub amount: Amount,
}

/// Accounts and bridges every scheme starts from.
#[derive(Debug, Clone)]
pub struct Topology {
    /// (name, shard, funds): open-loop clients that only send.
    pub senders: Vec<(String, ShardId, Amount)>,
    /// (name, shard): payout targets, starting empty.
    pub receivers: Vec<(String, ShardId)>,
    /// (name, source shard, target shard, funds per side).
    pub intermediaries: Vec<(String, ShardId, ShardId, Amount)>,
}

impl Topology {
    /// The designated hot intermediary carrying the skewed share.
    pub fn hot_intermediary(&self) -> &str {
        &self.intermediaries[0].0
    }
}

/// Upper bound of the default amount distribution, in whole currency.
const MAX_AMOUNT_WHOLE: i64 = 100;

pub fn build_topology(cfg: &ExperimentConfig) -> Topology {
    let shards = cfg.shards;
    // Brokers ring the shards: g_i bridges shard i%S to shard (i+1)%S, so
    // every shard both sends and receives.
    let intermediaries: Vec<(String, ShardId, ShardId, Amount)> = (0
        ..cfg.intermediary_group_size)
        .map(|i| {
            let src = i % shards;
            let dst = (i + 1) % shards;
            // Funded to absorb the entire workload's value on either side:
            // liquidity is not the variable under test.
            let funds = Amount::from_whole(cfg.tx_count as i64 * MAX_AMOUNT_WHOLE);
            (format!("g{i}"), src, dst, funds)
        })
        .collect();
    // Every client slot owns one sender and one receiver per shard, so a
    // slot sends at most once per window no matter where skew steers it:
    // contention stays on the intermediary, which is the variable under
    // test, never on the client accounts.
    let rounds = cfg.tx_count.div_ceil(cfg.concurrent_clients) as i64;
    let per_sender = Amount::from_whole((rounds + 1) * MAX_AMOUNT_WHOLE);
    let mut senders = Vec::with_capacity(shards * cfg.concurrent_clients);
    let mut receivers = Vec::with_capacity(shards * cfg.concurrent_clients);
    for s in 0..shards {
        for k in 0..cfg.concurrent_clients {
            senders.push((format!("c{s}_{k}"), s, per_sender));
            receivers.push((format!("r{s}_{k}"), s));
        }
    }
    Topology {
        senders,
        receivers,
        intermediaries,
    }
}

/// Amounts come from the seeded uniform(0.01, 100.00) two-decimal draw, or
/// from a replay file (one decimal per line, cycled when shorter than the
/// run).
fn amount_source(cfg: &ExperimentConfig) -> Result<Option<Vec<Amount>>, HarnessError> {
    let Some(path) = &cfg.amount_trace else {
        return Ok(None);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::BadTrace(format!("{}: {e}", path.display())))?;
    let mut amounts = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let amount: Amount = line
            .parse()
            .map_err(|e| HarnessError::BadTrace(format!("line {}: {e:?}", idx + 1)))?;
        if !amount.is_positive() {
            return Err(HarnessError::BadTrace(format!(
                "line {}: amounts must be positive",
                idx + 1
            )));
        }
        amounts.push(amount);
    }
    if amounts.is_empty() {
        return Err(HarnessError::BadTrace("trace holds no amounts".into()));
    }
    Ok(Some(amounts))
}

/// Emit the full transfer stream, ordered by arrival time.
///
/// Each of the `concurrent_clients` open-loop slots submits once per batch
/// window, staggered across the window with a little seeded jitter. A
/// `skewness` share of transfers routes through the hot intermediary; the
/// rest draw uniformly from the whole group, hot one included. The slot
/// then sends from its own account on the bridge's source shard to its
/// counterpart on the target shard.
pub fn generate_workload(cfg: &ExperimentConfig) -> Result<Vec<WorkloadTx>, HarnessError> {
    cfg.validate()?;
    let topo = build_topology(cfg);
    let trace = amount_source(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    let window = cfg.batch_timeout_ms;
    let clients = cfg.concurrent_clients as u64;
    let slot = (window / clients).max(1);
    // Routing draw in tenths of a basis point for an integer comparison.
    let hot_threshold = (cfg.skewness * 1_000.0).round() as u64;

    let mut load = Vec::with_capacity(cfg.tx_count);
    for i in 0..cfg.tx_count {
        let g_idx = if rng.gen_range(0..100_000u64) < hot_threshold {
            0
        } else {
            rng.gen_range(0..cfg.intermediary_group_size)
        };
        let (g_name, src, dst, _) = &topo.intermediaries[g_idx];
        let client = i % cfg.concurrent_clients;
        let from = topo.senders[src * cfg.concurrent_clients + client].0.clone();
        let to = topo.receivers[dst * cfg.concurrent_clients + client].0.clone();
        let amount = match &trace {
            Some(tr) => tr[i % tr.len()],
            // Two-decimal uniform draw over (0.01, 100.00].
            None => Amount::from_units(rng.gen_range(1..=MAX_AMOUNT_WHOLE as i128 * 100) * 10_000),
        };
        let round = i as u64 / clients;
        let jitter = rng.gen_range(0..=cfg.net_jitter_ms.min(slot.saturating_sub(1)));
        let at = SimTime::from_millis(round * window + client as u64 * slot + jitter);
        load.push(WorkloadTx {
            at,
            from,
            to,
            intermediary: g_name.clone(),
            amount,
        });
    }
    // Client slots can spill past the window when clients outnumber its
    // milliseconds; a stable sort restores arrival order either way.
    load.sort_by_key(|tx| tx.at);
    Ok(load)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig {
            shards: 2,
            intermediary_group_size: 4,
            tx_count: 10_000,
            concurrent_clients: 20,
            ..ExperimentConfig::default()
        }
    }

    fn hot_count(load: &[WorkloadTx]) -> usize {
        load.iter().filter(|tx| tx.intermediary == "g0").count()
    }

    #[test]
    fn full_skew_routes_everything_through_the_hot_intermediary() {
        let load = generate_workload(&ExperimentConfig {
            skewness: 100.0,
            ..cfg()
        })
        .unwrap();
        assert_eq!(hot_count(&load), 10_000);
    }

    #[test]
    fn zero_skew_gives_the_hot_intermediary_a_uniform_share() {
        let load = generate_workload(&ExperimentConfig {
            skewness: 0.0,
            ..cfg()
        })
        .unwrap();
        // Binomial(10_000, 1/4): mean 2500, sigma ~43; allow 3 sigma.
        let hot = hot_count(&load) as f64;
        assert!((hot - 2_500.0).abs() < 130.0, "hot share {hot} off uniform");
    }

    #[test]
    fn partial_skew_adds_the_uniform_share_on_top() {
        let load = generate_workload(&ExperimentConfig {
            skewness: 30.0,
            ..cfg()
        })
        .unwrap();
        // p = f + (1-f)/|G| = 0.30 + 0.70/4 = 0.475; sigma ~50.
        let hot = hot_count(&load) as f64;
        assert!((hot - 4_750.0).abs() < 150.0, "hot share {hot} off 47.5%");
    }

    #[test]
    fn same_seed_means_same_stream_and_new_seed_means_a_new_one() {
        let a = generate_workload(&cfg()).unwrap();
        let b = generate_workload(&cfg()).unwrap();
        assert_eq!(a, b);
        let c = generate_workload(&ExperimentConfig {
            rng_seed: 8,
            ..cfg()
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn arrivals_come_out_sorted_and_paced_by_client_slots() {
        let load = generate_workload(&cfg()).unwrap();
        assert!(load.windows(2).all(|w| w[0].at <= w[1].at));
        // 20 clients in a 2000ms window: arrivals spread over each round.
        let horizon = (10_000u64 / 20) * 2_000;
        assert!(load.last().unwrap().at < SimTime::from_millis(horizon + 2_000));
    }

    #[test]
    fn routes_always_match_the_bridge_shards() {
        let c = cfg();
        let topo = build_topology(&c);
        let load = generate_workload(&c).unwrap();
        for tx in &load {
            let (_, src, dst, _) = topo
                .intermediaries
                .iter()
                .find(|(name, ..)| *name == tx.intermediary)
                .unwrap();
            let sender_shard = topo.senders.iter().find(|(n, ..)| *n == tx.from).unwrap().1;
            let receiver_shard = topo.receivers.iter().find(|(n, _)| *n == tx.to).unwrap().1;
            assert_eq!(sender_shard, *src);
            assert_eq!(receiver_shard, *dst);
        }
    }

    #[test]
    fn amounts_stay_in_the_two_decimal_band() {
        let load = generate_workload(&cfg()).unwrap();
        let lo = Amount::from_units(10_000);
        let hi = Amount::from_whole(100);
        for tx in &load {
            assert!(tx.amount >= lo && tx.amount <= hi);
            assert_eq!(tx.amount.units() % 10_000, 0, "sub-cent amount");
        }
    }

    #[test]
    fn trace_amounts_replay_in_order_and_cycle() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "1.50\n# comment\n\n2.25\n7.00").unwrap();
        let load = generate_workload(&ExperimentConfig {
            tx_count: 5,
            concurrent_clients: 5,
            amount_trace: Some(file.path().to_path_buf()),
            ..cfg()
        })
        .unwrap();
        let mut got: Vec<Amount> = load.iter().map(|tx| tx.amount).collect();
        // The sort by arrival can reorder within a window; compare as sets
        // of (index-by-draw) by re-deriving: 5 txs, trace of 3 -> counts.
        got.sort();
        let mut want: Vec<Amount> = ["1.50", "2.25", "7.00", "1.50", "2.25"]
            .iter()
            .map(|s| s.parse().unwrap())
            .collect();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn bad_traces_are_rejected_with_line_numbers() {
        let miss = generate_workload(&ExperimentConfig {
            amount_trace: Some("/nonexistent/trace.txt".into()),
            ..cfg()
        });
        assert!(matches!(miss, Err(HarnessError::BadTrace(_))));

        let mut junk = tempfile::NamedTempFile::new().unwrap();
        writeln!(junk, "1.00\nnot-a-number").unwrap();
        let err = generate_workload(&ExperimentConfig {
            amount_trace: Some(junk.path().to_path_buf()),
            ..cfg()
        })
        .unwrap_err();
        assert!(err.to_string().starts_with("BAD_TRACE: line 2"), "{err}");

        let mut neg = tempfile::NamedTempFile::new().unwrap();
        writeln!(neg, "-3.00").unwrap();
        let err = generate_workload(&ExperimentConfig {
            amount_trace: Some(neg.path().to_path_buf()),
            ..cfg()
        })
        .unwrap_err();
        assert!(err.to_string().contains("positive"), "{err}");

        let mut empty = tempfile::NamedTempFile::new().unwrap();
        writeln!(empty, "# only chatter").unwrap();
        let err = generate_workload(&ExperimentConfig {
            amount_trace: Some(empty.path().to_path_buf()),
            ..cfg()
        })
        .unwrap_err();
        assert!(err.to_string().contains("no amounts"), "{err}");
    }

    #[test]
    fn topology_rings_the_shards_and_funds_the_bridges() {
        let topo = build_topology(&ExperimentConfig {
            shards: 3,
            intermediary_group_size: 5,
            tx_count: 1_000,
            concurrent_clients: 10,
            ..ExperimentConfig::default()
        });
        assert_eq!(topo.hot_intermediary(), "g0");
        for (i, (name, src, dst, funds)) in topo.intermediaries.iter().enumerate() {
            assert_eq!(name, &format!("g{i}"));
            assert_eq!(*src, i % 3);
            assert_eq!(*dst, (i + 1) % 3);
            assert_eq!(*funds, Amount::from_whole(100_000));
        }
        // One sender and one receiver per (shard, slot) pair, funded for
        // the worst case of every round drawing the same slot and shard.
        assert_eq!(topo.senders.len(), 30);
        assert_eq!(topo.receivers.len(), 30);
        assert_eq!(topo.senders[0].0, "c0_0");
        assert_eq!(topo.receivers[29].0, "r2_9");
        assert_eq!(topo.senders[0].2, Amount::from_whole(101 * 100));
    }

    #[test]
    fn a_slot_never_sends_twice_in_one_round() {
        let c = ExperimentConfig {
            skewness: 100.0,
            tx_count: 400,
            ..cfg()
        };
        let load = generate_workload(&c).unwrap();
        // Full skew is the worst case: every transfer sources from the hot
        // bridge's shard. Senders within any window of 20 stay distinct.
        for chunk in load.chunks(c.concurrent_clients) {
            let mut froms: Vec<&str> = chunk.iter().map(|tx| tx.from.as_str()).collect();
            froms.sort_unstable();
            froms.dedup();
            assert_eq!(froms.len(), chunk.len());
        }
    }
}
