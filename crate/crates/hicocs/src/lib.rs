//! Sharded-ledger simulator built around composite-key sub-brokers.
//!
//! The crate models a permissioned, sharded ledger in which cross-shard
//! transfers route through intermediary accounts. A naive routing scheme
//! serializes on the intermediary's account key and collapses under MVCC
//! conflicts; the engine here instead expands each intermediary into
//! per-transfer virtual sub-brokers (composite keys), accumulates the
//! escrowed amounts under encryption, and settles them in periodic batches.
//!
//! Module map:
//!
//! - [`amount`]: exact fixed-point money values and exchange rates.
//! - [`clock`]: virtual nanosecond clock for deterministic simulation.
//! - [`ledger`]: versioned world state, composite keys, and the
//!   simulate / order / validate-and-commit pipeline.
//! - [`crypto`]: transport encryption, key custody with access logging,
//!   plaintext-exposure auditing, and the homomorphic backends.
//! - [`engine`]: the cross-shard transaction lifecycle (initiate,
//!   preprocess, accumulate, synchronize, complete, rollback).
//! - [`reuse`]: composite-key pooling that folds per-transfer entries into
//!   per-initiator merged entries between settlements.
//! - [`baselines`]: vanilla two-leg transfers, two-phase locking, and
//!   optimistic concurrency control for comparison.
//! - [`harness`]: workload generation, the discrete-event simulator,
//!   metrics, and CSV/JSON export.
//! - [`acceptance`]: the end-to-end verification suite used by both
//!   `cargo test` and `shardbench verify`.

pub mod acceptance;
pub mod amount;
pub mod baselines;
pub mod clock;
pub mod crypto;
pub mod engine;
pub mod harness;
pub mod ledger;
pub mod reuse;

pub use amount::{Amount, Rate};
pub use clock::{SimTime, VirtualClock};
