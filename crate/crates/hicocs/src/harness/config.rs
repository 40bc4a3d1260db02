//! Experiment configuration: the one document that fully determines a run.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::amount::Rate;
use crate::baselines::BaselineScheme;
use crate::crypto::{HeBackendKind, HeParams};
use crate::engine::EngineConfig;

use super::HarnessError;

/// Which coordinator processes the workload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Hicocs,
    Vanilla,
    Twopl,
    Occ,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Hicocs, Scheme::Vanilla, Scheme::Twopl, Scheme::Occ];

    /// The baseline engine this scheme maps to, if it is not the batched one.
    pub fn as_baseline(self) -> Option<BaselineScheme> {
        match self {
            Scheme::Hicocs => None,
            Scheme::Vanilla => Some(BaselineScheme::Vanilla),
            Scheme::Twopl => Some(BaselineScheme::TwoPl),
            Scheme::Occ => Some(BaselineScheme::Occ),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Hicocs => "hicocs",
            Scheme::Vanilla => "vanilla",
            Scheme::Twopl => "twopl",
            Scheme::Occ => "occ",
        })
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hicocs" => Ok(Scheme::Hicocs),
            "vanilla" => Ok(Scheme::Vanilla),
            "twopl" | "2pl" => Ok(Scheme::Twopl),
            "occ" => Ok(Scheme::Occ),
            other => Err(format!("unknown scheme: {other}")),
        }
    }
}

/// Full experiment description. Every field has a default, so a config file
/// only states what it changes; unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub shards: usize,
    /// Committing peers per shard; recorded in reports, not simulated
    /// individually (one world state per shard is the commit authority).
    pub nodes_per_shard: usize,
    /// Number of intermediaries offering cross-shard service.
    pub intermediary_group_size: usize,
    /// Percentage of transfers routed through the one hot intermediary;
    /// the rest spread uniformly over the whole group.
    pub skewness: f64,
    pub block_size_mb: u64,
    pub batch_timeout_ms: u64,
    pub tx_count: usize,
    /// Open-loop client count; each client submits once per batch window.
    pub concurrent_clients: usize,
    pub scheme: Scheme,
    pub he_backend: HeBackendKind,
    /// Encoder scaling factor (the precision knob of the approximate
    /// backend).
    pub delta: f64,
    /// Ciphertext slot count.
    pub slot_count: usize,
    pub t_settle_ms: u64,
    /// Run a composite-key reuse epoch every k-th settlement tick;
    /// 0 disables reuse.
    pub reuse_every_k: u64,
    /// Source-to-target conversion rate.
    pub rate: f64,
    pub rng_seed: u64,
    /// Retry budget for the baseline schemes.
    pub max_retries: u32,
    pub net_delay_ms: u64,
    /// Deterministic arrival jitter is drawn within this bound.
    pub net_jitter_ms: u64,
    /// Optional replay file: one decimal amount per line, cycled if shorter
    /// than `tx_count`.
    pub amount_trace: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let he = HeParams::default();
        ExperimentConfig {
            shards: 16,
            nodes_per_shard: 4,
            intermediary_group_size: 20,
            skewness: 10.0,
            block_size_mb: 40,
            batch_timeout_ms: 2_000,
            tx_count: 10_000,
            concurrent_clients: 1_000,
            scheme: Scheme::Hicocs,
            he_backend: HeBackendKind::Approximate,
            delta: he.scaling_factor,
            slot_count: he.slot_count,
            t_settle_ms: 2_000,
            reuse_every_k: 5,
            rate: 1.0,
            rng_seed: 7,
            max_retries: 5,
            net_delay_ms: 5,
            net_jitter_ms: 1,
            amount_trace: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_path(path: &std::path::Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            HarnessError::ConfigInvalid(format!("cannot read {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |msg: &str| Err(HarnessError::ConfigInvalid(msg.to_string()));
        if self.shards < 2 {
            return fail("shards must be at least 2");
        }
        if self.nodes_per_shard == 0 {
            return fail("nodes_per_shard must be positive");
        }
        if self.intermediary_group_size == 0 {
            return fail("intermediary_group_size must be positive");
        }
        if !(0.0..=100.0).contains(&self.skewness) {
            return fail("skewness must lie in 0..=100");
        }
        if self.block_size_mb == 0 {
            return fail("block_size_mb must be positive");
        }
        if self.batch_timeout_ms == 0 {
            return fail("batch_timeout_ms must be positive");
        }
        if self.tx_count == 0 {
            return fail("tx_count must be positive");
        }
        if self.concurrent_clients == 0 {
            return fail("concurrent_clients must be positive");
        }
        if !(self.delta > 0.0) {
            return fail("delta must be positive");
        }
        if self.slot_count < 2 || !self.slot_count.is_power_of_two() {
            return fail("slot_count must be a power of two, at least 2");
        }
        if self.t_settle_ms == 0 {
            return fail("t_settle_ms must be positive");
        }
        if Rate::from_f64(self.rate).is_err() {
            return fail("rate must be positive and finite");
        }
        Ok(())
    }

    pub fn rate(&self) -> Rate {
        Rate::from_f64(self.rate).expect("validated")
    }

    pub fn block_size_limit(&self) -> u64 {
        self.block_size_mb * 1024 * 1024
    }

    /// Engine parameters for a batched-scheme run of this experiment.
    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            t_settle: crate::clock::SimTime::from_millis(self.t_settle_ms),
            rate: self.rate(),
            backend_kind: self.he_backend,
            he_params: HeParams {
                slot_count: self.slot_count,
                scaling_factor: self.delta,
                ..HeParams::default()
            },
            block_size_limit: self.block_size_limit(),
            batch_timeout: crate::clock::SimTime::from_millis(self.batch_timeout_ms),
            noise_seed: self.rng_seed,
            ..EngineConfig::default()
        }
    }

    /// Baseline parameters for the same experiment: identical window and
    /// delay model, lock holds spanning two windows. A waiter tolerates two
    /// full holds in front of it before its lock request times out.
    pub fn baseline_config(&self) -> crate::baselines::BaselineConfig {
        let window = crate::clock::SimTime::from_millis(self.batch_timeout_ms);
        let delay = crate::clock::SimTime::from_millis(self.net_delay_ms);
        let hold = window + window + delay + delay;
        crate::baselines::BaselineConfig {
            retry: crate::baselines::RetryPolicy {
                max_retries: self.max_retries,
                backoff: window,
            },
            lock_timeout: hold + hold,
            net_delay: delay,
            block_interval: window,
            block_size_limit: self.block_size_limit(),
            rate: self.rate(),
            wait_graph_checks: false,
        }
    }
}
