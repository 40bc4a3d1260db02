//! Virtual time for deterministic simulation.
//!
//! All latency and ordering semantics run on simulated nanoseconds; nothing
//! in the crate reads the wall clock. The event loop owns a [`VirtualClock`]
//! and advances it to each event's scheduled instant, so two runs with the
//! same seed observe identical timelines.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

/// An instant in simulated time, in nanoseconds from simulation start.
#[derive(
    Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(u64);

pub const NANOS_PER_MILLI: u64 = 1_000_000;

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_nanos(ns: u64) -> Self {
        SimTime(ns)
    }

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us * 1_000)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * NANOS_PER_MILLI)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    pub const fn as_millis(self) -> u64 {
        self.0 / NANOS_PER_MILLI
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / NANOS_PER_MILLI as f64
    }

    pub const fn saturating_add(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(other.0))
    }

    pub const fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl std::ops::Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.checked_add(rhs.0).expect("sim time overflow"))
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}ns", self.0)
    }
}

impl fmt::Debug for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SimTime({}ns)", self.0)
    }
}

/// Monotonic simulated clock with unique timestamp issuance.
///
/// `advance_to` never moves backwards; `unique_timestamp` hands out strictly
/// increasing instants (bumping by 1ns on ties), which gives every
/// transaction a distinct timestamp even when many are submitted at the same
/// simulated instant.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now_ns: AtomicU64,
    last_issued_ns: AtomicU64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        SimTime(self.now_ns.load(Ordering::SeqCst))
    }

    /// Move the clock forward to `t`; later of the two wins.
    pub fn advance_to(&self, t: SimTime) {
        self.now_ns.fetch_max(t.0, Ordering::SeqCst);
    }

    pub fn advance(&self, by: SimTime) {
        self.now_ns.fetch_add(by.0, Ordering::SeqCst);
    }

    /// A timestamp `>= now()` that is strictly greater than every timestamp
    /// previously issued by this clock.
    pub fn unique_timestamp(&self) -> SimTime {
        let now = self.now_ns.load(Ordering::SeqCst);
        let mut prev = self.last_issued_ns.load(Ordering::SeqCst);
        loop {
            let candidate = now.max(prev + 1);
            match self.last_issued_ns.compare_exchange(
                prev,
                candidate,
                Ordering::SeqCst,
                Ordering::SeqCst,
            ) {
                Ok(_) => return SimTime(candidate),
                Err(actual) => prev = actual,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn advance_is_monotonic() {
        let clock = VirtualClock::new();
        clock.advance_to(SimTime::from_millis(10));
        clock.advance_to(SimTime::from_millis(5));
        assert_eq!(clock.now(), SimTime::from_millis(10));
        clock.advance(SimTime::from_nanos(1));
        assert_eq!(clock.now().as_nanos(), 10 * NANOS_PER_MILLI + 1);
    }

    #[test]
    fn unique_timestamps_never_collide() {
        let clock = VirtualClock::new();
        clock.advance_to(SimTime::from_millis(1));
        let a = clock.unique_timestamp();
        let b = clock.unique_timestamp();
        let c = clock.unique_timestamp();
        assert!(a < b && b < c);
        assert!(a >= clock.now());
        // Advancing past the issued range resumes from the clock.
        clock.advance_to(SimTime::from_millis(2));
        let d = clock.unique_timestamp();
        assert_eq!(d, SimTime::from_millis(2));
    }

    #[test]
    fn unit_conversions() {
        assert_eq!(SimTime::from_millis(3).as_nanos(), 3_000_000);
        assert_eq!(SimTime::from_micros(1500).as_millis(), 1);
        assert_eq!(SimTime::from_millis(2).as_millis_f64(), 2.0);
        assert_eq!(
            SimTime::from_millis(5).saturating_sub(SimTime::from_millis(7)),
            SimTime::ZERO
        );
    }
}
