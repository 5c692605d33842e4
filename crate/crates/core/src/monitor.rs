//! Worker telemetry aggregation.
//!
//! Publishers hand [`WorkerStatus`] values to a [`Monitor`]; a single
//! aggregator thread owns the latest-per-worker table and answers snapshot
//! requests in the same queue, so a snapshot always reflects every publish
//! that was accepted before it was requested.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{unbounded, Receiver, Sender};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{SystemClock, WallClock};

pub const DEFAULT_TTL_MS: u32 = 3000;
pub const DEFAULT_PUBLISH_INTERVAL_MS: u64 = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MonitorError {
    #[error("malformed status: {0}")]
    MalformedStatus(String),
    #[error("monitor has shut down")]
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerStatus {
    pub worker_id: String,
    /// UTC milliseconds.
    pub timestamp: u64,
    pub cpu_pct: f32,
    pub mem_bytes: u64,
    pub queue_depths: BTreeMap<String, u32>,
    pub inflight: BTreeMap<String, u32>,
    pub device_util_pct: Option<f32>,
}

impl WorkerStatus {
    pub fn new(worker_id: impl Into<String>, timestamp: u64) -> Self {
        Self {
            worker_id: worker_id.into(),
            timestamp,
            cpu_pct: 0.0,
            mem_bytes: 0,
            queue_depths: BTreeMap::new(),
            inflight: BTreeMap::new(),
            device_util_pct: None,
        }
    }

    pub fn validate(&self) -> Result<(), MonitorError> {
        let pct = |v: f32| v.is_finite() && (0.0..=100.0).contains(&v);
        if self.worker_id.is_empty() {
            return Err(MonitorError::MalformedStatus("empty worker_id".into()));
        }
        if !pct(self.cpu_pct) {
            return Err(MonitorError::MalformedStatus(format!(
                "cpu_pct {} outside [0,100]",
                self.cpu_pct
            )));
        }
        if let Some(d) = self.device_util_pct {
            if !pct(d) {
                return Err(MonitorError::MalformedStatus(format!(
                    "device_util_pct {d} outside [0,100]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerEntry {
    pub status: WorkerStatus,
    pub stale: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSnapshot {
    pub taken_at: u64,
    pub ttl_ms: u32,
    pub workers: BTreeMap<String, WorkerEntry>,
}

impl ClusterSnapshot {
    pub fn stale_workers(&self) -> Vec<&str> {
        self.workers
            .iter()
            .filter(|(_, e)| e.stale)
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorStats {
    pub accepted: u64,
    /// Publishes ignored because an equal-or-newer status was already held.
    pub dropped: u64,
}

/// Latest-per-worker table with the monotonicity rule. Owned by the
/// aggregator thread; public so it can be exercised without threads.
#[derive(Debug, Default, Clone)]
pub struct StatusTable {
    latest: BTreeMap<String, WorkerStatus>,
    stats: MonitorStats,
}

impl StatusTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns false when the status was older than the stored one.
    pub fn apply(&mut self, status: WorkerStatus) -> bool {
        match self.latest.get(&status.worker_id) {
            Some(cur) if status.timestamp < cur.timestamp => {
                self.stats.dropped += 1;
                false
            }
            _ => {
                self.stats.accepted += 1;
                self.latest.insert(status.worker_id.clone(), status);
                true
            }
        }
    }

    pub fn stats(&self) -> MonitorStats {
        self.stats
    }

    /// Statuses stamped after `taken_at` (clock skew between hosts) are left
    /// out so the snapshot never reports the future.
    pub fn snapshot(&self, taken_at: u64, ttl_ms: u32) -> ClusterSnapshot {
        let workers = self
            .latest
            .iter()
            .filter(|(_, s)| s.timestamp <= taken_at)
            .map(|(k, s)| {
                (
                    k.clone(),
                    WorkerEntry {
                        stale: taken_at - s.timestamp > ttl_ms as u64,
                        status: s.clone(),
                    },
                )
            })
            .collect();
        ClusterSnapshot {
            taken_at,
            ttl_ms,
            workers,
        }
    }
}

enum Cmd {
    Publish(WorkerStatus),
    Snapshot(u32, Sender<ClusterSnapshot>),
    Stats(Sender<MonitorStats>),
}

/// Handle to the aggregator. Cloning shares the same table.
#[derive(Clone)]
pub struct Monitor {
    tx: Sender<Cmd>,
    _worker: Arc<AggregatorThread>,
}

struct AggregatorThread {
    tx: Sender<Cmd>,
    handle: parking_lot::Mutex<Option<JoinHandle<()>>>,
}

impl Drop for AggregatorThread {
    fn drop(&mut self) {
        // Swap in a dead sender so the aggregator sees a disconnect.
        let (dead, _) = unbounded();
        drop(std::mem::replace(&mut self.tx, dead));
        if let Some(h) = self.handle.lock().take() {
            let _ = h.join();
        }
    }
}

impl std::fmt::Debug for Monitor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Monitor").finish_non_exhaustive()
    }
}

impl Default for Monitor {
    fn default() -> Self {
        Self::new(Arc::new(SystemClock))
    }
}

impl Monitor {
    pub fn new(clock: Arc<dyn WallClock>) -> Self {
        let (tx, rx) = unbounded::<Cmd>();
        let handle = std::thread::Builder::new()
            .name("v2r-monitor".into())
            .spawn(move || aggregate(rx, clock))
            .expect("spawn monitor thread");
        Self {
            tx: tx.clone(),
            _worker: Arc::new(AggregatorThread {
                tx,
                handle: parking_lot::Mutex::new(Some(handle)),
            }),
        }
    }

    /// Validates and enqueues a status. The ack means the status was accepted
    /// for aggregation; whether it was newer than the stored one shows up in
    /// [`Monitor::stats`].
    pub fn publish_status(&self, status: WorkerStatus) -> Result<(), MonitorError> {
        status.validate()?;
        self.tx
            .send(Cmd::Publish(status))
            .map_err(|_| MonitorError::Closed)
    }

    pub fn snapshot(&self, ttl_ms: u32) -> Result<ClusterSnapshot, MonitorError> {
        let (reply, rx) = crossbeam_channel::bounded(1);
        self.tx
            .send(Cmd::Snapshot(ttl_ms, reply))
            .map_err(|_| MonitorError::Closed)?;
        rx.recv().map_err(|_| MonitorError::Closed)
    }

    pub fn stats(&self) -> Result<MonitorStats, MonitorError> {
        let (reply, rx) = crossbeam_channel::bounded(1);
        self.tx
            .send(Cmd::Stats(reply))
            .map_err(|_| MonitorError::Closed)?;
        rx.recv().map_err(|_| MonitorError::Closed)
    }
}

fn aggregate(rx: Receiver<Cmd>, clock: Arc<dyn WallClock>) {
    let mut table = StatusTable::new();
    while let Ok(cmd) = rx.recv() {
        match cmd {
            Cmd::Publish(s) => {
                let id = s.timestamp;
                if !table.apply(s) {
                    tracing::debug!(timestamp = id, "out-of-order status dropped");
                }
            }
            Cmd::Snapshot(ttl, reply) => {
                let _ = reply.send(table.snapshot(clock.utc_ms(), ttl));
            }
            Cmd::Stats(reply) => {
                let _ = reply.send(table.stats());
            }
        }
    }
}

/// Best-effort process telemetry from procfs; zeros elsewhere.
#[derive(Debug, Default)]
pub struct ProcessSampler {
    last: Option<(u64, std::time::Instant)>,
}

impl ProcessSampler {
    pub fn new() -> Self {
        Self::default()
    }

    fn cpu_ticks() -> Option<u64> {
        let stat = std::fs::read_to_string("/proc/self/stat").ok()?;
        // Fields after the parenthesised comm; utime and stime are 14 and 15.
        let rest = &stat[stat.rfind(')')? + 2..];
        let f: Vec<&str> = rest.split_whitespace().collect();
        Some(f.get(11)?.parse::<u64>().ok()? + f.get(12)?.parse::<u64>().ok()?)
    }

    fn rss_bytes() -> u64 {
        std::fs::read_to_string("/proc/self/statm")
            .ok()
            .and_then(|s| s.split_whitespace().nth(1)?.parse::<u64>().ok())
            .map(|pages| pages * 4096)
            .unwrap_or(0)
    }

    /// CPU percent since the previous call (clamped to [0,100]) and RSS.
    pub fn sample(&mut self) -> (f32, u64) {
        let now = std::time::Instant::now();
        let cpu = match (Self::cpu_ticks(), self.last) {
            (Some(t), Some((prev, at))) => {
                let secs = now.duration_since(at).as_secs_f64();
                self.last = Some((t, now));
                if secs > 0.0 {
                    // procfs reports in clock ticks, 100 per second on Linux.
                    ((t.saturating_sub(prev) as f64 / 100.0) / secs * 100.0).clamp(0.0, 100.0)
                        as f32
                } else {
                    0.0
                }
            }
            (Some(t), None) => {
                self.last = Some((t, now));
                0.0
            }
            _ => 0.0,
        };
        (cpu, Self::rss_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;

    fn status(id: &str, ts: u64) -> WorkerStatus {
        WorkerStatus::new(id, ts)
    }

    #[test]
    fn empty_snapshot() {
        let m = Monitor::new(Arc::new(ManualClock::new(1000)));
        let s = m.snapshot(DEFAULT_TTL_MS).unwrap();
        assert!(s.workers.is_empty());
        assert_eq!(s.taken_at, 1000);
    }

    #[test]
    fn first_publish_is_fresh() {
        let m = Monitor::new(Arc::new(ManualClock::new(1000)));
        m.publish_status(status("w1", 1000)).unwrap();
        let s = m.snapshot(DEFAULT_TTL_MS).unwrap();
        assert!(!s.workers["w1"].stale);
    }

    #[test]
    fn older_publish_dropped() {
        let m = Monitor::new(Arc::new(ManualClock::new(1000)));
        m.publish_status(status("w1", 100)).unwrap();
        m.publish_status(status("w1", 50)).unwrap();
        let s = m.snapshot(DEFAULT_TTL_MS).unwrap();
        assert_eq!(s.workers["w1"].status.timestamp, 100);
        assert_eq!(
            m.stats().unwrap(),
            MonitorStats {
                accepted: 1,
                dropped: 1
            }
        );
    }

    #[test]
    fn ten_seconds_old_is_stale() {
        let clock = Arc::new(ManualClock::new(20_000));
        let m = Monitor::new(clock);
        m.publish_status(status("w1", 10_000)).unwrap();
        assert!(m.snapshot(3000).unwrap().workers["w1"].stale);
    }

    #[test]
    fn ttl_boundary_is_not_stale() {
        let mut t = StatusTable::new();
        t.apply(status("w", 1000));
        assert!(!t.snapshot(4000, 3000).workers["w"].stale);
        assert!(t.snapshot(4001, 3000).workers["w"].stale);
    }

    #[test]
    fn future_status_excluded() {
        let mut t = StatusTable::new();
        t.apply(status("w", 5000));
        assert!(t.snapshot(4000, 3000).workers.is_empty());
    }

    #[test]
    fn rejects_out_of_range() {
        let m = Monitor::default();
        let mut s = status("w", 1);
        s.cpu_pct = 120.0;
        assert!(matches!(
            m.publish_status(s),
            Err(MonitorError::MalformedStatus(_))
        ));
        let mut s = status("w", 1);
        s.device_util_pct = Some(f32::NAN);
        assert!(m.publish_status(s).is_err());
        assert!(m.publish_status(status("", 1)).is_err());
    }

    #[test]
    fn sampler_does_not_panic() {
        let mut p = ProcessSampler::new();
        let _ = p.sample();
        let (cpu, _) = p.sample();
        assert!((0.0..=100.0).contains(&cpu));
    }
}
