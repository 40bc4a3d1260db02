//! End-to-end acceptance suite: one test per criterion. Each test prints
//! its scoreboard line (visible with `--nocapture`; `shardbench verify`
//! prints the same lines) and enforces the criterion's wall-clock budget.
//!
//! Criteria 3 and 4 share one cached sweep, so whichever runs first pays
//! the simulation cost and the other reads the cached reports.

use std::time::{Duration, Instant};

use hicocs::acceptance::run_criterion;

fn check(id: u8, budget: Option<Duration>) {
    let started = Instant::now();
    let outcome = run_criterion(id);
    let elapsed = started.elapsed();
    println!("{outcome} ({elapsed:.1?})");
    assert!(outcome.passed, "{outcome}");
    if let Some(budget) = budget {
        assert!(
            elapsed <= budget,
            "criterion {id} took {elapsed:?}, over its {budget:?} budget"
        );
    }
}

#[test]
fn criterion_01_mvcc_oracle_equivalence() {
    check(1, Some(Duration::from_secs(30)));
}

#[test]
fn criterion_02_intermediary_contention() {
    check(2, Some(Duration::from_secs(5)));
}

#[test]
fn criterion_03_success_rate_separation() {
    check(3, Some(Duration::from_secs(300)));
}

#[test]
fn criterion_04_throughput_separation() {
    check(4, Some(Duration::from_secs(300)));
}

#[test]
fn criterion_05_cipher_sum_accuracy() {
    check(5, Some(Duration::from_secs(60)));
}

#[test]
fn criterion_06_conservation_under_faults() {
    check(6, Some(Duration::from_secs(180)));
}

#[test]
fn criterion_07_double_spend_arbitration() {
    check(7, Some(Duration::from_secs(5)));
}

#[test]
fn criterion_08_pool_reuse_equivalence() {
    check(8, Some(Duration::from_secs(120)));
}

#[test]
fn criterion_09_confidentiality_boundary() {
    check(9, Some(Duration::from_secs(120)));
}

#[test]
fn criterion_10_export_determinism() {
    check(10, None);
}
