//! Dynamic batching.
//!
//! [`BatchQueue`] is the clock-free state machine: callers pass the current
//! monotonic time in, so a scripted clock can drive it exactly.
//! [`BatchRouter`] owns one queue per model, stamps requests with a
//! [`MonotonicClock`], runs a timer thread per queue for deadline triggers
//! and emits formed batches on a channel.
//!
//! A batch forms when the queue reaches the planned size (`size`), when a
//! queued request has waited its `deadline_ms` (`timeout`, taking up to the
//! planned size from the front), or on an explicit flush (`drain`).

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{Receiver, Sender};
use parking_lot::{Condvar, Mutex, RwLock};
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::clock::{MonotonicClock, SystemClock};
use crate::tensor::{Tensor, TensorSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchTrigger {
    Size,
    Timeout,
    Drain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRequest {
    pub request_id: u64,
    pub model_id: String,
    pub payload: Tensor,
    /// Monotonic ms, stamped on submit.
    pub enqueued_at: f64,
    /// Longest the request may wait in the queue.
    pub deadline_ms: f32,
}

impl InferenceRequest {
    pub fn new(
        request_id: u64,
        model_id: impl Into<String>,
        payload: Tensor,
        deadline_ms: f32,
    ) -> Self {
        Self {
            request_id,
            model_id: model_id.into(),
            payload,
            enqueued_at: 0.0,
            deadline_ms,
        }
    }

    fn expires_at(&self) -> f64 {
        self.enqueued_at + self.deadline_ms as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceBatch {
    pub batch_id: u64,
    pub model_id: String,
    /// FIFO by `enqueued_at`.
    pub requests: Vec<InferenceRequest>,
    pub formed_at: f64,
    pub trigger: BatchTrigger,
}

impl InferenceBatch {
    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    pub fn request_ids(&self) -> Vec<u64> {
        self.requests.iter().map(|r| r.request_id).collect()
    }

    /// Longest queueing wait among the members.
    pub fn max_wait_ms(&self) -> f64 {
        self.requests
            .iter()
            .map(|r| self.formed_at - r.enqueued_at)
            .fold(0.0, f64::max)
    }
}

#[derive(Debug)]
pub struct BatchQueue {
    model_id: String,
    input_spec: Option<TensorSpec>,
    batch_size: usize,
    pending: VecDeque<InferenceRequest>,
    next_batch_id: u64,
    closed: bool,
}

impl BatchQueue {
    pub fn new(
        model_id: impl Into<String>,
        input_spec: Option<TensorSpec>,
        batch_size: usize,
    ) -> Self {
        Self {
            model_id: model_id.into(),
            input_spec,
            batch_size: batch_size.max(1),
            pending: VecDeque::new(),
            next_batch_id: 0,
            closed: false,
        }
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    /// Earliest time at which some queued request hits its deadline.
    pub fn next_expiry(&self) -> Option<f64> {
        self.pending
            .iter()
            .map(InferenceRequest::expires_at)
            .reduce(f64::min)
    }

    fn take(&mut self, n: usize, now: f64, trigger: BatchTrigger) -> InferenceBatch {
        let n = n.min(self.pending.len());
        let requests: Vec<_> = self.pending.drain(..n).collect();
        let batch = InferenceBatch {
            batch_id: self.next_batch_id,
            model_id: self.model_id.clone(),
            requests,
            formed_at: now,
            trigger,
        };
        self.next_batch_id += 1;
        batch
    }

    /// Switches the planned batch size. Requests already queued are batched
    /// under the new size from here on.
    pub fn set_batch_size(&mut self, batch_size: usize, now: f64) -> Vec<InferenceBatch> {
        self.batch_size = batch_size.max(1);
        self.poll(now)
    }

    pub fn submit(
        &mut self,
        mut req: InferenceRequest,
        now: f64,
    ) -> Result<Vec<InferenceBatch>, DataError> {
        if self.closed {
            return Err(DataError::QueueClosed(self.model_id.clone()));
        }
        if req.model_id != self.model_id {
            return Err(DataError::PayloadMismatch(format!(
                "request {} is for model {}, queue serves {}",
                req.request_id, req.model_id, self.model_id
            )));
        }
        if !(req.deadline_ms.is_finite() && req.deadline_ms > 0.0) {
            return Err(DataError::InvalidParameter(format!(
                "deadline_ms must be > 0, got {}",
                req.deadline_ms
            )));
        }
        if let Some(spec) = &self.input_spec {
            if !spec.accepts(&req.payload) {
                return Err(DataError::PayloadMismatch(format!(
                    "request {}: {:?} {:?} does not conform to {spec}",
                    req.request_id,
                    req.payload.dtype(),
                    req.payload.dims
                )));
            }
        }
        let mut out = self.poll(now);
        req.enqueued_at = now;
        self.pending.push_back(req);
        out.extend(self.poll(now));
        Ok(out)
    }

    /// Forms every batch that is due at `now`.
    pub fn poll(&mut self, now: f64) -> Vec<InferenceBatch> {
        let mut out = Vec::new();
        while self.pending.len() >= self.batch_size {
            out.push(self.take(self.batch_size, now, BatchTrigger::Size));
        }
        while self.next_expiry().is_some_and(|t| t <= now) {
            out.push(self.take(self.batch_size, now, BatchTrigger::Timeout));
        }
        out
    }

    /// Flushes everything queued, in batches of at most the planned size.
    pub fn drain(&mut self, now: f64) -> Vec<InferenceBatch> {
        let mut out = Vec::new();
        while !self.pending.is_empty() {
            out.push(self.take(self.batch_size, now, BatchTrigger::Drain));
        }
        out
    }
}

struct Lane {
    queue: Mutex<BatchQueue>,
    wake: Condvar,
}

/// Per-model batch queues sharing one output channel.
pub struct BatchRouter {
    lanes: RwLock<HashMap<String, Arc<Lane>>>,
    clock: Arc<dyn MonotonicClock>,
    out: Sender<InferenceBatch>,
    timers: bool,
    shutdown: Arc<AtomicBool>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl fmt::Debug for BatchRouter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BatchRouter")
            .field("models", &self.lanes.read().keys().collect::<Vec<_>>())
            .field("timers", &self.timers)
            .finish()
    }
}

impl BatchRouter {
    /// Router on the system clock with deadline timers running.
    pub fn realtime() -> (Self, Receiver<InferenceBatch>) {
        Self::new(Arc::new(SystemClock), true)
    }

    /// With `timers == false` deadlines only fire from [`BatchRouter::tick`],
    /// which is how scripted clocks drive it.
    pub fn new(clock: Arc<dyn MonotonicClock>, timers: bool) -> (Self, Receiver<InferenceBatch>) {
        let (tx, rx) = crossbeam_channel::unbounded();
        (
            Self {
                lanes: RwLock::new(HashMap::new()),
                clock,
                out: tx,
                timers,
                shutdown: Arc::new(AtomicBool::new(false)),
                threads: Mutex::new(Vec::new()),
            },
            rx,
        )
    }

    pub fn now_ms(&self) -> f64 {
        self.clock.now_ms()
    }

    /// Creates the queue for `model_id` if it does not exist yet.
    pub fn open_queue(&self, model_id: &str, input_spec: Option<TensorSpec>, batch_size: usize) {
        let mut lanes = self.lanes.write();
        if lanes.contains_key(model_id) {
            return;
        }
        let lane = Arc::new(Lane {
            queue: Mutex::new(BatchQueue::new(model_id, input_spec, batch_size)),
            wake: Condvar::new(),
        });
        lanes.insert(model_id.to_string(), lane.clone());
        if self.timers {
            let clock = self.clock.clone();
            let out = self.out.clone();
            let shutdown = self.shutdown.clone();
            let handle = std::thread::Builder::new()
                .name(format!("batcher-{model_id}"))
                .spawn(move || timer_loop(lane, clock, out, shutdown))
                .expect("spawn batcher timer");
            self.threads.lock().push(handle);
        }
    }

    fn lane(&self, model_id: &str) -> Result<Arc<Lane>, DataError> {
        self.lanes
            .read()
            .get(model_id)
            .cloned()
            .ok_or_else(|| DataError::UnknownModelQueue(model_id.to_string()))
    }

    fn emit(&self, batches: Vec<InferenceBatch>) {
        for b in batches {
            // Receiver gone means nobody is consuming; nothing to do.
            let _ = self.out.send(b);
        }
    }

    pub fn submit(&self, req: InferenceRequest) -> Result<(), DataError> {
        let lane = self.lane(&req.model_id)?;
        let mut q = lane.queue.lock();
        let batches = q.submit(req, self.clock.now_ms())?;
        self.emit(batches);
        lane.wake.notify_one();
        Ok(())
    }

    /// Atomically switches the planned batch size for subsequent batches.
    pub fn set_batch_size(&self, model_id: &str, batch_size: usize) -> Result<(), DataError> {
        let lane = self.lane(model_id)?;
        let mut q = lane.queue.lock();
        let batches = q.set_batch_size(batch_size, self.clock.now_ms());
        self.emit(batches);
        lane.wake.notify_one();
        Ok(())
    }

    pub fn batch_size(&self, model_id: &str) -> Result<usize, DataError> {
        Ok(self.lane(model_id)?.queue.lock().batch_size())
    }

    /// Forms every batch that is due now, across all queues.
    pub fn tick(&self) {
        let lanes: Vec<_> = self.lanes.read().values().cloned().collect();
        for lane in lanes {
            let mut q = lane.queue.lock();
            let batches = q.poll(self.clock.now_ms());
            self.emit(batches);
        }
    }

    pub fn drain(&self, model_id: &str) -> Result<(), DataError> {
        let lane = self.lane(model_id)?;
        let mut q = lane.queue.lock();
        let batches = q.drain(self.clock.now_ms());
        self.emit(batches);
        Ok(())
    }

    pub fn drain_all(&self) {
        let ids: Vec<String> = self.lanes.read().keys().cloned().collect();
        for id in ids {
            let _ = self.drain(&id);
        }
    }

    pub fn close(&self, model_id: &str) -> Result<(), DataError> {
        let lane = self.lane(model_id)?;
        lane.queue.lock().close();
        lane.wake.notify_one();
        Ok(())
    }
}

impl Drop for BatchRouter {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        for lane in self.lanes.read().values() {
            let _guard = lane.queue.lock();
            lane.wake.notify_all();
        }
        for h in self.threads.lock().drain(..) {
            let _ = h.join();
        }
    }
}

fn timer_loop(
    lane: Arc<Lane>,
    clock: Arc<dyn MonotonicClock>,
    out: Sender<InferenceBatch>,
    shutdown: Arc<AtomicBool>,
) {
    let mut q = lane.queue.lock();
    loop {
        if shutdown.load(Ordering::SeqCst) || (q.is_closed() && q.is_empty()) {
            return;
        }
        match q.next_expiry() {
            None => {
                lane.wake.wait(&mut q);
            }
            Some(t) => {
                let now = clock.now_ms();
                if t <= now {
                    for b in q.poll(now) {
                        let _ = out.send(b);
                    }
                } else {
                    let wait = Duration::from_secs_f64((t - now) / 1000.0);
                    lane.wake.wait_for(&mut q, wait);
                }
            }
        }
    }
}
