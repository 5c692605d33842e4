//! Executor dispatch and the feature fork (file + index).

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use thiserror::Error;

use crate::data_engine::InferenceBatch;
use crate::executors::{Executor, ExecutorError};
use crate::matching::{FeatureFileWriter, FeatureVector, MatchError, SharedIndex};
use crate::server::protocol::{codes, ErrorMsg, InferenceOutput};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("executor failure: {0}")]
    ExecutorFailure(#[from] ExecutorError),
}

impl ServiceError {
    pub fn to_error_msg(&self, request_ids: Vec<u64>) -> ErrorMsg {
        let code = match self {
            ServiceError::UnknownModel(_) => codes::UNKNOWN_MODEL,
            ServiceError::ExecutorFailure(_) => codes::EXECUTOR_FAILURE,
        };
        ErrorMsg {
            code,
            message: self.to_string(),
            request_ids,
        }
    }
}

/// Where features go after inference.
pub trait FeatureSink: Send + Sync {
    fn accept(&self, features: &[FeatureVector]) -> Result<(), MatchError>;
}

/// Appends features to an HYFV file and, optionally, to a live index.
pub struct FileIndexSink {
    writer: Mutex<FeatureFileWriter>,
    index: Option<SharedIndex>,
}

impl FileIndexSink {
    pub fn open(
        path: impl AsRef<Path>,
        dim: u32,
        index: Option<SharedIndex>,
    ) -> Result<Self, MatchError> {
        Ok(Self {
            writer: Mutex::new(FeatureFileWriter::open(path, dim)?),
            index,
        })
    }
}

impl FeatureSink for FileIndexSink {
    fn accept(&self, features: &[FeatureVector]) -> Result<(), MatchError> {
        {
            let mut w = self.writer.lock();
            for f in features {
                w.append(f)?;
            }
            w.flush()?;
        }
        if let Some(index) = &self.index {
            index.add(features)?;
        }
        Ok(())
    }
}

/// Collects features in memory; handy for tests and in-process runs.
#[derive(Default)]
pub struct MemorySink {
    pub features: Mutex<Vec<FeatureVector>>,
}

impl FeatureSink for MemorySink {
    fn accept(&self, features: &[FeatureVector]) -> Result<(), MatchError> {
        self.features.lock().extend_from_slice(features);
        Ok(())
    }
}

#[derive(Default)]
struct ModelCounters {
    inflight: AtomicU32,
    queued: AtomicU32,
}

/// Maps model ids to executors and runs whole batches.
pub struct ModelService {
    executors: HashMap<String, Arc<dyn Executor>>,
    counters: HashMap<String, ModelCounters>,
    sink: Option<Arc<dyn FeatureSink>>,
}

impl ModelService {
    pub fn new(sink: Option<Arc<dyn FeatureSink>>) -> Self {
        Self {
            executors: HashMap::new(),
            counters: HashMap::new(),
            sink,
        }
    }

    pub fn with_model(mut self, model_id: impl Into<String>, exec: Arc<dyn Executor>) -> Self {
        self.add_model(model_id, exec);
        self
    }

    pub fn add_model(&mut self, model_id: impl Into<String>, exec: Arc<dyn Executor>) {
        let id = model_id.into();
        self.counters.insert(id.clone(), ModelCounters::default());
        self.executors.insert(id, exec);
    }

    pub fn model_ids(&self) -> Vec<String> {
        let mut ids: Vec<_> = self.executors.keys().cloned().collect();
        ids.sort();
        ids
    }

    pub fn executor(&self, model_id: &str) -> Option<&Arc<dyn Executor>> {
        self.executors.get(model_id)
    }

    pub fn inflight(&self) -> std::collections::BTreeMap<String, u32> {
        self.counters
            .iter()
            .map(|(k, c)| (k.clone(), c.inflight.load(Ordering::Relaxed)))
            .collect()
    }

    pub fn queue_depths(&self) -> std::collections::BTreeMap<String, u32> {
        self.counters
            .iter()
            .map(|(k, c)| (k.clone(), c.queued.load(Ordering::Relaxed)))
            .collect()
    }

    /// Book-keeping for requests waiting in a dispatch queue.
    pub(crate) fn note_queued(&self, model_id: &str, n: u32, enqueue: bool) {
        if let Some(c) = self.counters.get(model_id) {
            if enqueue {
                c.queued.fetch_add(n, Ordering::Relaxed);
            } else {
                c.queued.fetch_sub(n, Ordering::Relaxed);
            }
        }
    }

    /// Runs one batch. An empty batch yields no outputs. Failures apply to
    /// the whole batch. Features are forked to the sink; a sink failure is
    /// logged and does not fail the response.
    pub fn infer(
        &self,
        model_id: &str,
        batch: &[(u64, &Tensor)],
    ) -> Result<Vec<InferenceOutput>, ServiceError> {
        let exec = self
            .executors
            .get(model_id)
            .ok_or_else(|| ServiceError::UnknownModel(model_id.to_string()))?;
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let counter = &self.counters[model_id].inflight;
        counter.fetch_add(batch.len() as u32, Ordering::Relaxed);
        let result = exec.execute(batch);
        counter.fetch_sub(batch.len() as u32, Ordering::Relaxed);
        let outputs = result?;

        if let Some(sink) = &self.sink {
            let feats: Vec<FeatureVector> =
                outputs.iter().filter_map(|o| o.feature.clone()).collect();
            if !feats.is_empty() {
                if let Err(e) = sink.accept(&feats) {
                    tracing::warn!(model_id, error = %e, "feature sink rejected batch");
                }
            }
        }
        Ok(outputs
            .into_iter()
            .map(|o| InferenceOutput {
                request_id: o.request_id,
                predictions: o.predictions,
                feature: o.feature,
            })
            .collect())
    }

    pub fn infer_batch(
        &self,
        batch: &InferenceBatch,
    ) -> Result<Vec<InferenceOutput>, ServiceError> {
        let items: Vec<(u64, &Tensor)> = batch
            .requests
            .iter()
            .map(|r| (r.request_id, &r.payload))
            .collect();
        self.infer(&batch.model_id, &items)
    }
}
