//! Offline latency/throughput measurement per batch size.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::utc_now_ms;
use crate::executors::{Executor, ExecutorError};
use crate::orchestrator::ProfileCache;
use crate::tensor::{DType, Tensor, TensorData};

pub const DEFAULT_WARMUP: usize = 3;
pub const DEFAULT_ITERATIONS: usize = 30;
pub const DEFAULT_BATCH_SIZES: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];
pub const MIN_ITERATIONS: usize = 5;
pub const DEFAULT_DEVICE: &str = "cpu-local";

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("no samples")]
    EmptySamples,
    #[error("percentile must be in (0, 1], got {0}")]
    BadPercentile(f32),
    #[error("batch size {size} exceeds executor max {max}")]
    BatchTooLarge { size: usize, max: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub model_id: String,
    pub device_tag: String,
    pub batch_size: u32,
    pub lat_mean_ms: f32,
    pub lat_p50_ms: f32,
    pub lat_p95_ms: f32,
    pub lat_p99_ms: f32,
    /// Items per second: `batch_size / lat_mean_ms * 1000`.
    pub throughput_ips: f32,
    pub iterations: u32,
    pub measured_at: u64,
}

impl ProfileRecord {
    pub fn validate(&self) -> Result<(), String> {
        let lats = [
            self.lat_mean_ms,
            self.lat_p50_ms,
            self.lat_p95_ms,
            self.lat_p99_ms,
        ];
        if lats.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err("latencies must be finite and > 0".into());
        }
        if !(self.lat_p50_ms <= self.lat_p95_ms && self.lat_p95_ms <= self.lat_p99_ms) {
            return Err(format!(
                "percentiles out of order: p50={} p95={} p99={}",
                self.lat_p50_ms, self.lat_p95_ms, self.lat_p99_ms
            ));
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return Err("batch_size and iterations must be >= 1".into());
        }
        if !(self.throughput_ips.is_finite() && self.throughput_ips > 0.0) {
            return Err("throughput must be finite and > 0".into());
        }
        if self.model_id.is_empty() {
            return Err("empty model_id".into());
        }
        Ok(())
    }
}

/// Nearest-rank percentile: the element at `ceil(p·n) − 1` of the sorted
/// samples.
pub fn percentile(samples: &[f32], p: f32) -> Result<f32, ProfileError> {
    if samples.is_empty() {
        return Err(ProfileError::EmptySamples);
    }
    if !(p > 0.0 && p <= 1.0) {
        return Err(ProfileError::BadPercentile(p));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f32::total_cmp);
    Ok(sorted[nearest_rank(sorted.len(), p)])
}

fn nearest_rank(n: usize, p: f32) -> usize {
    let rank = (p as f64 * n as f64).ceil() as usize;
    rank.clamp(1, n) - 1
}

#[derive(Debug, Clone)]
pub struct ProfileConfig {
    pub batch_sizes: Vec<usize>,
    pub warmup: usize,
    pub iterations: usize,
    pub device_tag: String,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            batch_sizes: DEFAULT_BATCH_SIZES.to_vec(),
            warmup: DEFAULT_WARMUP,
            iterations: DEFAULT_ITERATIONS,
            device_tag: DEFAULT_DEVICE.to_string(),
        }
    }
}

/// Result of a profiling run. When an execute call fails the remaining
/// batch sizes are skipped and `failure` says why.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRun {
    pub records: Vec<ProfileRecord>,
    pub failure: Option<ExecutorError>,
}

fn synth_input(exec: &dyn Executor) -> Tensor {
    let dims = exec.input_spec().item_dims();
    let n: usize = dims.iter().map(|&d| d as usize).product();
    let data = match exec.input_spec().dtype {
        DType::F32 => TensorData::F32(vec![0.0; n]),
        DType::U8 => TensorData::U8(vec![0; n]),
    };
    Tensor { dims, data }
}

/// Profiles `exec` at each batch size, sequentially. Records are also
/// pushed into `cache` when one is given.
pub fn profile_model(
    model_id: &str,
    exec: &dyn Executor,
    config: &ProfileConfig,
    cache: Option<&ProfileCache>,
) -> Result<ProfileRun, ProfileError> {
    if config.iterations < MIN_ITERATIONS {
        return Err(ProfileError::Precondition(format!(
            "iterations must be >= {MIN_ITERATIONS}, got {}",
            config.iterations
        )));
    }
    if config.batch_sizes.is_empty() || config.batch_sizes[0] == 0 {
        return Err(ProfileError::Precondition(
            "batch sizes must be non-empty and >= 1".into(),
        ));
    }
    if config.batch_sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(ProfileError::Precondition(format!(
            "batch sizes must be strictly increasing: {:?}",
            config.batch_sizes
        )));
    }
    let max = exec.max_batch();
    if let Some(&size) = config.batch_sizes.iter().find(|&&b| b > max) {
        return Err(ProfileError::BatchTooLarge { size, max });
    }

    let item = synth_input(exec);
    let mut records = Vec::with_capacity(config.batch_sizes.len());
    for &b in &config.batch_sizes {
        let batch: Vec<(u64, &Tensor)> = (0..b as u64).map(|i| (i, &item)).collect();
        let mut samples = Vec::with_capacity(config.iterations);
        for i in 0..config.warmup + config.iterations {
            let start = Instant::now();
            let out = exec.execute(&batch);
            let ms = start.elapsed().as_secs_f64() * 1000.0;
            if let Err(e) = out {
                tracing::warn!(model_id, batch = b, error = %e, "profiling aborted");
                return Ok(ProfileRun {
                    records,
                    failure: Some(e),
                });
            }
            if i >= config.warmup {
                samples.push(ms.max(1e-6) as f32);
            }
        }
        let mean = samples.iter().map(|&s| s as f64).sum::<f64>() / samples.len() as f64;
        let lat_mean_ms = mean as f32;
        let record = ProfileRecord {
            model_id: model_id.to_string(),
            device_tag: config.device_tag.clone(),
            batch_size: b as u32,
            lat_mean_ms,
            lat_p50_ms: percentile(&samples, 0.50)?,
            lat_p95_ms: percentile(&samples, 0.95)?,
            lat_p99_ms: percentile(&samples, 0.99)?,
            throughput_ips: (b as f64 / lat_mean_ms as f64 * 1000.0) as f32,
            iterations: config.iterations as u32,
            measured_at: utc_now_ms(),
        };
        if let Some(cache) = cache {
            cache
                .put_profile(record.clone())
                .map_err(|e| ProfileError::Precondition(e.to_string()))?;
        }
        records.push(record);
    }
    Ok(ProfileRun {
        records,
        failure: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executors::{FnExecutor, SyntheticLatency, SyntheticLatencyParams};
    use crate::tensor::TensorSpec;

    #[test]
    fn nearest_rank_examples() {
        assert_eq!(percentile(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap(), 2.0);
        assert_eq!(percentile(&[4.0, 3.0, 2.0, 1.0], 1.0).unwrap(), 4.0);
        for p in [0.01, 0.5, 0.99, 1.0] {
            assert_eq!(percentile(&[5.0], p).unwrap(), 5.0);
        }
        assert_eq!(percentile(&[], 0.5), Err(ProfileError::EmptySamples));
        assert!(percentile(&[1.0], 0.0).is_err());
        assert!(percentile(&[1.0], 1.5).is_err());
    }

    fn fast_exec() -> SyntheticLatency {
        SyntheticLatency::with_input_spec(
            SyntheticLatencyParams {
                a_ms: 0.2,
                s_ms: 0.0,
                q_ms: 0.0,
                jitter_frac: 0.0,
            },
            0,
            "u8:batch,2".parse().unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn too_few_iterations_is_rejected() {
        let cfg = ProfileConfig {
            iterations: 3,
            ..Default::default()
        };
        assert!(matches!(
            profile_model("m", &fast_exec(), &cfg, None),
            Err(ProfileError::Precondition(_))
        ));
    }

    #[test]
    fn batch_sizes_must_increase() {
        let cfg = ProfileConfig {
            batch_sizes: vec![1, 4, 4],
            iterations: 5,
            ..Default::default()
        };
        assert!(profile_model("m", &fast_exec(), &cfg, None).is_err());
    }

    #[test]
    fn batch_larger_than_executor_max() {
        let exec = fast_exec().with_max_batch(8);
        let cfg = ProfileConfig {
            batch_sizes: vec![4, 16],
            iterations: 5,
            ..Default::default()
        };
        assert_eq!(
            profile_model("m", &exec, &cfg, None),
            Err(ProfileError::BatchTooLarge { size: 16, max: 8 })
        );
    }

    #[test]
    fn executor_failure_returns_partial_records() {
        let exec = FnExecutor::new("u8:batch,1".parse::<TensorSpec>().unwrap(), None, |batch| {
            if batch.len() > 2 {
                Err(ExecutorError::Failed("too big for this box".into()))
            } else {
                Ok(batch
                    .iter()
                    .map(|&(request_id, _)| crate::executors::ExecutorOutput {
                        request_id,
                        predictions: vec![],
                        feature: None,
                    })
                    .collect())
            }
        });
        let cfg = ProfileConfig {
            batch_sizes: vec![1, 2, 4, 8],
            iterations: 5,
            warmup: 0,
            ..Default::default()
        };
        let run = profile_model("m", &exec, &cfg, None).unwrap();
        assert_eq!(run.records.len(), 2);
        assert!(matches!(run.failure, Some(ExecutorError::Failed(_))));
    }

    #[test]
    fn records_satisfy_invariants() {
        let cfg = ProfileConfig {
            batch_sizes: vec![1, 2, 4],
            iterations: 5,
            warmup: 1,
            ..Default::default()
        };
        let run = profile_model("m", &fast_exec(), &cfg, None).unwrap();
        assert!(run.failure.is_none());
        for r in &run.records {
            r.validate().unwrap();
            let expect = r.batch_size as f32 / r.lat_mean_ms * 1000.0;
            assert!(((r.throughput_ips - expect) / expect).abs() < 1e-3);
            assert_eq!(r.device_tag, DEFAULT_DEVICE);
        }
    }
}
