//! End-to-end verification suite.
//!
//! Ten numbered checks cover the claims the simulator is built to
//! demonstrate: MVCC correctness against a serial oracle, the contention
//! construction, success-rate and throughput separation from the baselines,
//! homomorphic accuracy, conservation and atomicity under faults,
//! double-spend handling, composite-key reuse equivalence, confidentiality
//! of amounts in transit, and bit-level determinism of exports.
//!
//! The same checks run two ways: `cargo test` (one test per criterion) and
//! `shardbench verify` (one pass/fail line per criterion, exit code 3 on
//! any failure). Oracles in [`oracles`] are deliberately naive
//! re-implementations kept independent of the production code paths they
//! judge.

pub mod gen;
pub mod oracles;

mod criteria;

pub use criteria::{run_all, run_criterion, CriterionOutcome, CRITERIA_COUNT};
