//! Model executors: the contract the server calls into, plus two
//! deterministic built-ins that stand in for real networks.
//!
//! * [`SyntheticLatency`] sleeps for `a + s·b + q·b²` ms per batch of `b`,
//!   which gives the latency/throughput curve of a real model without one.
//! * [`HistogramEmbedding`] turns an RGB image into a unit-norm feature by
//!   projecting its 96-bin colour histogram through a seeded random matrix.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matching::FeatureVector;
use crate::registry::{ModelManifest, Task};
use crate::tensor::{DType, Dim, Tensor, TensorData, TensorSpec};

pub const DEFAULT_MAX_BATCH: usize = 256;
pub const DEFAULT_EMBED_DIM: u32 = 128;
pub const DEFAULT_IMAGE_SIDE: u32 = 64;
pub const HIST_BINS: usize = 32;
pub const HIST_LEN: usize = 3 * HIST_BINS;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExecutorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch of {size} exceeds executor max {max}")]
    BatchTooLarge { size: usize, max: usize },
    #[error("bad dimensions: {0}")]
    BadDimensions(String),
    #[error("executor failed: {0}")]
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: String,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutorOutput {
    pub request_id: u64,
    /// Sorted by descending score.
    pub predictions: Vec<Prediction>,
    pub feature: Option<FeatureVector>,
}

pub trait Executor: Send + Sync {
    fn input_spec(&self) -> &TensorSpec;

    /// Dimension of emitted features, `None` if the executor emits none.
    fn feature_dim(&self) -> Option<u32>;

    fn max_batch(&self) -> usize {
        DEFAULT_MAX_BATCH
    }

    /// Runs an already validated batch. Implementations return one output
    /// per input, in input order.
    fn run(&self, batch: &[(u64, &Tensor)]) -> Result<Vec<ExecutorOutput>, ExecutorError>;

    /// Validates the batch against the declared contract, then runs it.
    fn execute(&self, batch: &[(u64, &Tensor)]) -> Result<Vec<ExecutorOutput>, ExecutorError> {
        if batch.is_empty() {
            return Err(ExecutorError::ShapeMismatch("empty batch".into()));
        }
        if batch.len() > self.max_batch() {
            return Err(ExecutorError::BatchTooLarge {
                size: batch.len(),
                max: self.max_batch(),
            });
        }
        let spec = self.input_spec();
        for (id, t) in batch {
            if !spec.accepts(t) {
                return Err(ExecutorError::ShapeMismatch(format!(
                    "request {id}: got {:?} {:?}, expected {spec}",
                    t.dtype(),
                    t.dims
                )));
            }
        }
        let out = self.run(batch)?;
        if out.len() != batch.len() {
            return Err(ExecutorError::Failed(format!(
                "executor returned {} outputs for {} inputs",
                out.len(),
                batch.len()
            )));
        }
        Ok(out)
    }
}

/// splitmix64 step: advances `state` and returns the next output.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maps the top 24 bits of a splitmix64 output onto [-1, 1).
pub fn unit_f32(x: u64) -> f32 {
    ((x >> 40) as f32 / 16_777_216.0) * 2.0 - 1.0
}

/// Row-major `HIST_LEN × dim` projection matrix for `seed`.
pub fn projection_matrix(seed: u64, dim: u32) -> Vec<f32> {
    let mut state = seed;
    (0..HIST_LEN * dim as usize)
        .map(|_| unit_f32(splitmix64(&mut state)))
        .collect()
}

/// Per-channel 32-bin intensity histogram of an interleaved RGB image,
/// normalised by pixel count. Layout: channel-major, `c * 32 + bin`.
pub fn rgb_histogram(pixels: &[u8]) -> [f32; HIST_LEN] {
    let mut counts = [0u32; HIST_LEN];
    for px in pixels.chunks_exact(3) {
        for (c, &v) in px.iter().enumerate() {
            counts[c * HIST_BINS + (v >> 3) as usize] += 1;
        }
    }
    let n = (pixels.len() / 3).max(1) as f32;
    let mut hist = [0f32; HIST_LEN];
    for (h, &c) in hist.iter_mut().zip(counts.iter()) {
        *h = c as f32 / n;
    }
    hist
}

fn project_and_normalize(hist: &[f32; HIST_LEN], projection: &[f32], dim: usize) -> Vec<f32> {
    let mut out = vec![0f32; dim];
    for (r, &h) in hist.iter().enumerate() {
        if h == 0.0 {
            continue;
        }
        let row = &projection[r * dim..(r + 1) * dim];
        for (o, &m) in out.iter_mut().zip(row) {
            *o += h * m;
        }
    }
    let mut sq = 0f32;
    for &v in &out {
        sq += v * v;
    }
    let norm = sq.sqrt();
    if norm > 0.0 {
        for v in &mut out {
            *v /= norm;
        }
    }
    out
}

/// Seeded histogram embedding of an `H×W×3` u8 image.
pub fn embed_histogram(
    image: &[u8],
    height: u32,
    width: u32,
    seed: u64,
    dim: u32,
) -> Result<Vec<f32>, ExecutorError> {
    if height == 0 || width == 0 {
        return Err(ExecutorError::BadDimensions(format!(
            "image must be at least 1x1, got {height}x{width}"
        )));
    }
    if dim < 8 {
        return Err(ExecutorError::BadDimensions(format!(
            "embedding dim must be >= 8, got {dim}"
        )));
    }
    let expected = height as usize * width as usize * 3;
    if image.len() != expected {
        return Err(ExecutorError::BadDimensions(format!(
            "{height}x{width}x3 image needs {expected} bytes, got {}",
            image.len()
        )));
    }
    let hist = rgb_histogram(image);
    Ok(project_and_normalize(
        &hist,
        &projection_matrix(seed, dim),
        dim as usize,
    ))
}

/// Inverse of the data engine's `v / 255` scaling.
pub fn quantize_unit(values: &[f32]) -> Vec<u8> {
    values
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

pub struct HistogramEmbedding {
    seed: u64,
    dim: u32,
    projection: Vec<f32>,
    input_spec: TensorSpec,
}

impl fmt::Debug for HistogramEmbedding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HistogramEmbedding")
            .field("seed", &self.seed)
            .field("dim", &self.dim)
            .field("input_spec", &self.input_spec)
            .finish()
    }
}

impl HistogramEmbedding {
    /// Embedding over `side×side` RGB tensors in f32 `[0,1]` form, which is
    /// what the data engine's image preprocessing produces.
    pub fn new(seed: u64, dim: u32) -> Result<Self, ExecutorError> {
        let spec = TensorSpec::new(
            DType::F32,
            vec![
                Dim::Batch,
                Dim::Fixed(DEFAULT_IMAGE_SIDE),
                Dim::Fixed(DEFAULT_IMAGE_SIDE),
                Dim::Fixed(3),
            ],
        );
        Self::with_input_spec(seed, dim, spec)
    }

    /// `spec` must describe `H×W×3` items (u8 or f32 in `[0,1]`).
    pub fn with_input_spec(seed: u64, dim: u32, spec: TensorSpec) -> Result<Self, ExecutorError> {
        if dim < 8 {
            return Err(ExecutorError::BadDimensions(format!(
                "embedding dim must be >= 8, got {dim}"
            )));
        }
        let item = spec.item_dims();
        if item.len() != 3 || item[2] != 3 {
            return Err(ExecutorError::BadDimensions(format!(
                "histogram embedding needs HxWx3 items, spec is {spec}"
            )));
        }
        Ok(Self {
            seed,
            dim,
            projection: projection_matrix(seed, dim),
            input_spec: spec,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    pub fn embed_tensor(&self, t: &Tensor) -> (Vec<f32>, [f32; HIST_LEN]) {
        let hist = match &t.data {
            TensorData::U8(px) => rgb_histogram(px),
            TensorData::F32(v) => rgb_histogram(&quantize_unit(v)),
        };
        let feature = project_and_normalize(&hist, &self.projection, self.dim as usize);
        (feature, hist)
    }
}

fn dominant_bins(hist: &[f32; HIST_LEN]) -> Vec<Prediction> {
    let mut idx: Vec<usize> = (0..HIST_LEN).filter(|&i| hist[i] > 0.0).collect();
    idx.sort_by(|&a, &b| hist[b].total_cmp(&hist[a]).then(a.cmp(&b)));
    idx.truncate(3);
    idx.into_iter()
        .map(|i| Prediction {
            label: format!("{}{:02}", ['r', 'g', 'b'][i / HIST_BINS], i % HIST_BINS),
            score: hist[i].clamp(0.0, 1.0),
        })
        .collect()
}

impl Executor for HistogramEmbedding {
    fn input_spec(&self) -> &TensorSpec {
        &self.input_spec
    }

    fn feature_dim(&self) -> Option<u32> {
        Some(self.dim)
    }

    fn run(&self, batch: &[(u64, &Tensor)]) -> Result<Vec<ExecutorOutput>, ExecutorError> {
        Ok(batch
            .iter()
            .map(|&(request_id, t)| {
                let (values, hist) = self.embed_tensor(t);
                ExecutorOutput {
                    request_id,
                    predictions: dominant_bins(&hist),
                    feature: Some(FeatureVector::new(request_id, values)),
                }
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLatencyParams {
    pub a_ms: f32,
    pub s_ms: f32,
    pub q_ms: f32,
    pub jitter_frac: f32,
}

impl Default for SyntheticLatencyParams {
    fn default() -> Self {
        Self {
            a_ms: 8.0,
            s_ms: 0.5,
            q_ms: 0.05,
            jitter_frac: 0.0,
        }
    }
}

impl SyntheticLatencyParams {
    pub fn validate(&self) -> Result<(), ExecutorError> {
        let ok = self.a_ms > 0.0
            && self.s_ms >= 0.0
            && self.q_ms >= 0.0
            && (0.0..=0.5).contains(&self.jitter_frac)
            && self.a_ms.is_finite()
            && self.s_ms.is_finite()
            && self.q_ms.is_finite();
        if ok {
            Ok(())
        } else {
            Err(ExecutorError::BadDimensions(format!(
                "invalid synthetic latency params {self:?}"
            )))
        }
    }

    /// Modelled latency for a batch of `b` before jitter.
    pub fn model_ms(&self, b: usize) -> f64 {
        let b = b as f64;
        self.a_ms as f64 + self.s_ms as f64 * b + self.q_ms as f64 * b * b
    }
}

pub struct SyntheticLatency {
    params: SyntheticLatencyParams,
    seed: u64,
    calls: AtomicU64,
    input_spec: TensorSpec,
    max_batch: usize,
}

impl fmt::Debug for SyntheticLatency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SyntheticLatency")
            .field("params", &self.params)
            .field("input_spec", &self.input_spec)
            .finish()
    }
}

impl SyntheticLatency {
    pub fn new(params: SyntheticLatencyParams, seed: u64) -> Result<Self, ExecutorError> {
        let spec = TensorSpec::new(
            DType::F32,
            vec![
                Dim::Batch,
                Dim::Fixed(DEFAULT_IMAGE_SIDE),
                Dim::Fixed(DEFAULT_IMAGE_SIDE),
                Dim::Fixed(3),
            ],
        );
        Self::with_input_spec(params, seed, spec)
    }

    pub fn with_input_spec(
        params: SyntheticLatencyParams,
        seed: u64,
        input_spec: TensorSpec,
    ) -> Result<Self, ExecutorError> {
        params.validate()?;
        Ok(Self {
            params,
            seed,
            calls: AtomicU64::new(0),
            input_spec,
            max_batch: DEFAULT_MAX_BATCH,
        })
    }

    pub fn with_max_batch(mut self, max: usize) -> Self {
        self.max_batch = max;
        self
    }

    pub fn params(&self) -> SyntheticLatencyParams {
        self.params
    }

    fn latency_for(&self, b: usize) -> Duration {
        let mut ms = self.params.model_ms(b);
        if self.params.jitter_frac > 0.0 {
            let mut state = self.seed ^ self.calls.fetch_add(1, Ordering::Relaxed);
            let u = unit_f32(splitmix64(&mut state)) as f64;
            ms *= 1.0 + self.params.jitter_frac as f64 * u;
        }
        Duration::from_secs_f64(ms / 1000.0)
    }
}

/// Final stretch spent spinning; OS sleeps overshoot by roughly this much.
const SPIN: Duration = Duration::from_micros(200);

/// Waits until `dur` has elapsed on the monotonic clock: sleeps most of it,
/// then spins so the modeled latency is hit closely.
fn sleep_for(dur: Duration) {
    let deadline = Instant::now() + dur;
    loop {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        let left = deadline - now;
        if left > SPIN {
            std::thread::sleep(left - SPIN);
        } else {
            std::hint::spin_loop();
        }
    }
}

impl Executor for SyntheticLatency {
    fn input_spec(&self) -> &TensorSpec {
        &self.input_spec
    }

    fn feature_dim(&self) -> Option<u32> {
        None
    }

    fn max_batch(&self) -> usize {
        self.max_batch
    }

    fn run(&self, batch: &[(u64, &Tensor)]) -> Result<Vec<ExecutorOutput>, ExecutorError> {
        sleep_for(self.latency_for(batch.len()));
        Ok(batch
            .iter()
            .map(|&(request_id, _)| ExecutorOutput {
                request_id,
                predictions: vec![Prediction {
                    label: "ok".into(),
                    score: 1.0,
                }],
                feature: None,
            })
            .collect())
    }
}

type RunFn = dyn Fn(&[(u64, &Tensor)]) -> Result<Vec<ExecutorOutput>, ExecutorError> + Send + Sync;

/// Executor backed by a closure, for binding custom models.
pub struct FnExecutor {
    input_spec: TensorSpec,
    feature_dim: Option<u32>,
    run: Box<RunFn>,
}

impl FnExecutor {
    pub fn new<F>(input_spec: TensorSpec, feature_dim: Option<u32>, run: F) -> Self
    where
        F: Fn(&[(u64, &Tensor)]) -> Result<Vec<ExecutorOutput>, ExecutorError>
            + Send
            + Sync
            + 'static,
    {
        Self {
            input_spec,
            feature_dim,
            run: Box::new(run),
        }
    }
}

impl Executor for FnExecutor {
    fn input_spec(&self) -> &TensorSpec {
        &self.input_spec
    }

    fn feature_dim(&self) -> Option<u32> {
        self.feature_dim
    }

    fn run(&self, batch: &[(u64, &Tensor)]) -> Result<Vec<ExecutorOutput>, ExecutorError> {
        (self.run)(batch)
    }
}

/// Builds the built-in executor that serves a registered manifest.
///
/// Embedding models become a [`HistogramEmbedding`] over the manifest's
/// input spec with the output spec's last dim; synthetic models become a
/// [`SyntheticLatency`] with `synthetic` parameters.
pub fn executor_for_manifest(
    manifest: &ModelManifest,
    seed: u64,
    synthetic: SyntheticLatencyParams,
) -> Result<Arc<dyn Executor>, ExecutorError> {
    match manifest.task {
        Task::Embedding => {
            let dim = manifest
                .output_spec
                .item_dims()
                .last()
                .copied()
                .unwrap_or(DEFAULT_EMBED_DIM);
            Ok(Arc::new(HistogramEmbedding::with_input_spec(
                seed,
                dim,
                manifest.input_spec.clone(),
            )?))
        }
        Task::Synthetic => Ok(Arc::new(SyntheticLatency::with_input_spec(
            synthetic,
            seed,
            manifest.input_spec.clone(),
        )?)),
        other => Err(ExecutorError::Failed(format!(
            "no built-in executor for task {other}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(side: u32, fill: impl Fn(usize) -> u8) -> Tensor {
        let n = (side * side * 3) as usize;
        Tensor::u8(vec![side, side, 3], (0..n).map(fill).collect()).unwrap()
    }

    fn u8_embedder(seed: u64) -> HistogramEmbedding {
        HistogramEmbedding::with_input_spec(seed, 128, "u8:batch,8,8,3".parse().unwrap()).unwrap()
    }

    #[test]
    fn splitmix_reference_values() {
        // Reference outputs of splitmix64 seeded with 0.
        let mut s = 0u64;
        assert_eq!(splitmix64(&mut s), 0xE220_A839_7B1D_CDAF);
        assert_eq!(splitmix64(&mut s), 0x6E78_9E6A_A1B9_65F4);
    }

    #[test]
    fn unit_f32_range() {
        assert_eq!(unit_f32(0), -1.0);
        assert!(unit_f32(u64::MAX) < 1.0);
        assert_eq!(unit_f32(1u64 << 63), 0.0);
    }

    #[test]
    fn identical_images_embed_identically() {
        let e = u8_embedder(7);
        let img = image(8, |i| (i * 37 % 251) as u8);
        let out = e.execute(&[(1, &img), (2, &img)]).unwrap();
        let a = out[0].feature.as_ref().unwrap();
        let b = out[1].feature.as_ref().unwrap();
        assert_eq!(a.values, b.values);
        let norm: f32 = a.values.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        assert_eq!(a.id, 1);
        assert_eq!(b.id, 2);
    }

    #[test]
    fn f32_input_matches_u8_input() {
        let img = image(8, |i| (i * 13 % 256) as u8);
        let as_f32 = Tensor::f32(
            img.dims.clone(),
            img.as_u8()
                .unwrap()
                .iter()
                .map(|&v| v as f32 / 255.0)
                .collect(),
        )
        .unwrap();
        let e_u8 = u8_embedder(3);
        let e_f32 = HistogramEmbedding::with_input_spec(3, 128, "f32:batch,8,8,3".parse().unwrap())
            .unwrap();
        assert_eq!(e_u8.embed_tensor(&img).0, e_f32.embed_tensor(&as_f32).0);
    }

    #[test]
    fn empty_batch_is_shape_mismatch() {
        let e = u8_embedder(7);
        assert!(matches!(
            e.execute(&[]),
            Err(ExecutorError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let e = u8_embedder(7);
        let img = image(4, |_| 0);
        assert!(matches!(
            e.execute(&[(0, &img)]),
            Err(ExecutorError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let e = SyntheticLatency::with_input_spec(
            SyntheticLatencyParams {
                a_ms: 0.01,
                s_ms: 0.0,
                q_ms: 0.0,
                jitter_frac: 0.0,
            },
            0,
            "u8:batch,1".parse().unwrap(),
        )
        .unwrap()
        .with_max_batch(2);
        let t = Tensor::u8(vec![1], vec![0]).unwrap();
        assert!(matches!(
            e.execute(&[(0, &t), (1, &t), (2, &t)]),
            Err(ExecutorError::BatchTooLarge { size: 3, max: 2 })
        ));
    }

    #[test]
    fn embed_rejects_bad_dimensions() {
        assert!(embed_histogram(&[], 0, 1, 0, 16).is_err());
        assert!(embed_histogram(&[0, 0, 0], 1, 1, 0, 4).is_err());
        assert!(embed_histogram(&[0, 0], 1, 1, 0, 16).is_err());
    }

    #[test]
    fn predictions_are_sorted_descending() {
        let e = u8_embedder(1);
        let img = image(8, |i| if i % 3 == 0 { 250 } else { (i % 7) as u8 * 40 });
        let out = e.execute(&[(9, &img)]).unwrap();
        let preds = &out[0].predictions;
        assert!(!preds.is_empty());
        assert!(preds.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(preds.iter().all(|p| (0.0..=1.0).contains(&p.score)));
    }

    #[test]
    fn synthetic_latency_sleeps_the_model_time() {
        let e = SyntheticLatency::with_input_spec(
            SyntheticLatencyParams {
                a_ms: 8.0,
                s_ms: 0.5,
                q_ms: 0.05,
                jitter_frac: 0.0,
            },
            0,
            "u8:batch,1".parse().unwrap(),
        )
        .unwrap();
        // 8 + 0.5*4 + 0.05*16 = 10.8 ms
        assert!((e.params().model_ms(4) - 10.8).abs() < 1e-5);
        let t = Tensor::u8(vec![1], vec![0]).unwrap();
        let batch: Vec<_> = (0..4).map(|i| (i, &t)).collect();
        let start = Instant::now();
        let out = e.execute(&batch).unwrap();
        let ms = start.elapsed().as_secs_f64() * 1000.0;
        assert!(ms >= 10.8, "slept {ms} ms");
        assert!(ms < 10.8 + 20.0, "slept {ms} ms");
        assert_eq!(out.len(), 4);
        assert!(out.iter().all(|o| o.predictions[0].label == "ok"));
        assert_eq!(
            out.iter().map(|o| o.request_id).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
    }

    #[test]
    fn synthetic_params_are_validated() {
        let bad = SyntheticLatencyParams {
            a_ms: 0.0,
            ..Default::default()
        };
        assert!(SyntheticLatency::new(bad, 0).is_err());
        let bad = SyntheticLatencyParams {
            jitter_frac: 0.6,
            ..Default::default()
        };
        assert!(SyntheticLatency::new(bad, 0).is_err());
    }
}
