//! Harness-side monotonic time base.
//!
//! Latency samples and power samples are both stamped from the same
//! [`Clock`], so energy windows line up with request intervals.

use std::time::{Duration, Instant};

/// Monotonic nanosecond clock anchored at an origin instant.
#[derive(Debug, Clone, Copy)]
pub struct Clock {
    origin: Instant,
}

impl Clock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }

    /// Nanoseconds elapsed since the origin.
    pub fn now_ns(&self) -> u64 {
        self.to_ns(Instant::now())
    }

    /// Converts an instant to this clock's nanosecond scale. Instants
    /// before the origin saturate to zero.
    pub fn to_ns(&self, at: Instant) -> u64 {
        at.saturating_duration_since(self.origin).as_nanos() as u64
    }

    pub fn instant_at(&self, ns: u64) -> Instant {
        self.origin + Duration::from_nanos(ns)
    }

    /// Sleeps until the clock reads at least `ns`. Returns immediately if
    /// that time has already passed.
    pub fn sleep_until(&self, ns: u64) {
        let target = self.instant_at(ns);
        let now = Instant::now();
        if target > now {
            std::thread::sleep(target - now);
        }
    }
}

impl Default for Clock {
    fn default() -> Self {
        Self::new()
    }
}
