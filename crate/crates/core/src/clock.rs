//! Clock abstractions so batching and staleness logic can run against a
//! scripted clock in tests.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::OnceLock;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

/// Monotonic milliseconds since an arbitrary origin.
pub trait MonotonicClock: Send + Sync {
    fn now_ms(&self) -> f64;
}

/// Wall-clock UTC milliseconds since the Unix epoch.
pub trait WallClock: Send + Sync {
    fn utc_ms(&self) -> u64;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

fn process_origin() -> Instant {
    static ORIGIN: OnceLock<Instant> = OnceLock::new();
    *ORIGIN.get_or_init(Instant::now)
}

impl MonotonicClock for SystemClock {
    fn now_ms(&self) -> f64 {
        process_origin().elapsed().as_secs_f64() * 1000.0
    }
}

impl WallClock for SystemClock {
    fn utc_ms(&self) -> u64 {
        utc_now_ms()
    }
}

pub fn utc_now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// A manually advanced clock. Time is kept in microseconds so fractional
/// milliseconds survive without float drift.
#[derive(Debug, Default)]
pub struct ManualClock {
    micros: AtomicU64,
}

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        Self {
            micros: AtomicU64::new(start_ms * 1000),
        }
    }

    pub fn set_ms(&self, ms: f64) {
        self.micros
            .store((ms * 1000.0).round() as u64, Ordering::SeqCst);
    }

    pub fn advance_ms(&self, ms: f64) {
        self.micros
            .fetch_add((ms * 1000.0).round() as u64, Ordering::SeqCst);
    }
}

impl MonotonicClock for ManualClock {
    fn now_ms(&self) -> f64 {
        self.micros.load(Ordering::SeqCst) as f64 / 1000.0
    }
}

impl WallClock for ManualClock {
    fn utc_ms(&self) -> u64 {
        self.micros.load(Ordering::SeqCst) / 1000
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manual_clock_advances() {
        let c = ManualClock::new(100);
        assert_eq!(c.utc_ms(), 100);
        c.advance_ms(20.5);
        assert!((MonotonicClock::now_ms(&c) - 120.5).abs() < 1e-9);
        assert_eq!(c.utc_ms(), 120);
    }

    #[test]
    fn system_clock_is_monotone() {
        let a = SystemClock.now_ms();
        let b = SystemClock.now_ms();
        assert!(b >= a);
    }
}
