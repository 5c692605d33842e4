//! End-to-end workflows behind the `v2r` binary: the ingest → shots →
//! preprocess → batch → infer → index/search pipeline, synthetic fixtures
//! and the benchmark suites.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::data_engine::{
    detect_shots, frame_histogram, gray_to_rgb, preprocess_image, read_stream, BatchQueue,
    BatchTrigger, DataError, FrameStream, InferenceRequest, PixFmt, Shot, StreamHeader,
    DEFAULT_MIN_SHOT_LEN, DEFAULT_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::executors::{splitmix64, unit_f32, SyntheticLatency, SyntheticLatencyParams};
use crate::matching::{FeatureVector, FlatIndex, MatchResult, Metric};
use crate::orchestrator::{Percentile, ProfileCache, SloPolicy, PROFILE_CACHE_FILE};
use crate::profiler::{profile_model, ProfileConfig, ProfileRecord, DEFAULT_DEVICE};
use crate::registry::Registry;
use crate::server::{Client, InferenceOutput, ModelService};
use crate::tensor::Tensor;

pub const HOME_ENV: &str = "V2R_HOME";
pub const DEFAULT_BATCH_SIZE: u32 = 8;
pub const DEFAULT_DEADLINE_MS: f32 = 20.0;
pub const DEFAULT_SLO_MS: f32 = 100.0;

/// State directory: registry catalog and blobs plus the profile cache.
#[derive(Debug, Clone)]
pub struct Home {
    root: PathBuf,
}

impl Home {
    /// `explicit`, else `$V2R_HOME`, else `./.v2r`.
    pub fn resolve(explicit: Option<PathBuf>) -> Self {
        let root = explicit
            .or_else(|| std::env::var_os(HOME_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(".v2r"));
        Self { root }
    }

    pub fn at(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn registry(&self) -> Result<Registry> {
        Ok(Registry::open(&self.root)?)
    }

    pub fn profile_cache(&self) -> Result<ProfileCache> {
        Ok(ProfileCache::open(self.root.join(PROFILE_CACHE_FILE))?)
    }
}

// ---------------------------------------------------------------------------
// Fixtures
// ---------------------------------------------------------------------------

/// Synthetic stream made of solid-colour shots with a little per-pixel
/// noise. Shot colours sit in the middle of histogram bins and differ
/// between shots, so every cut is detectable and noise never crosses a bin.
#[derive(Debug, Clone, Serialize)]
pub struct SynthSpec {
    pub width: u32,
    pub height: u32,
    pub pix_fmt: PixFmt,
    pub shots: u32,
    pub frames_per_shot: u32,
    /// Maximum absolute per-pixel noise, at most 3.
    pub noise: u8,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            pix_fmt: PixFmt::Rgb8,
            shots: 3,
            frames_per_shot: 30,
            noise: 2,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn frame_count(&self) -> u32 {
        self.shots * self.frames_per_shot
    }

    /// Bin-centred colours, one per shot. RGB colours are all distinct; gray
    /// streams only have 32 levels, so there a level just differs from the
    /// previous shot's.
    pub fn shot_colours(&self) -> Vec<[u8; 3]> {
        let mut state = self.seed ^ 0x5EED_C010_0125;
        let mut seen = BTreeSet::new();
        let mut out: Vec<[u8; 3]> = Vec::with_capacity(self.shots as usize);
        while out.len() < self.shots as usize {
            let x = splitmix64(&mut state);
            let mut bins = [
                (x & 31) as u8,
                ((x >> 8) & 31) as u8,
                ((x >> 16) & 31) as u8,
            ];
            let ok = if self.pix_fmt == PixFmt::Gray8 {
                bins = [bins[0]; 3];
                out.last().is_none_or(|p| p[0] != bins[0] * 8 + 4)
            } else {
                seen.insert(bins)
            };
            if ok {
                out.push(bins.map(|b| b * 8 + 4));
            }
        }
        out
    }

    pub fn header(&self) -> StreamHeader {
        StreamHeader::new(self.width, self.height, self.pix_fmt, self.frame_count())
    }

    /// Frame `i`, deterministic in (spec, i).
    pub fn frame(&self, colours: &[[u8; 3]], i: u32) -> Vec<u8> {
        let shot = (i / self.frames_per_shot) as usize;
        let colour = colours[shot];
        let c = self.pix_fmt.channels() as usize;
        let n = self.width as usize * self.height as usize * c;
        let noise = self.noise.min(3) as i32;
        let mut state = self.seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64);
        let mut out = Vec::with_capacity(n);
        let mut bits = 0u64;
        for p in 0..n {
            if p % 16 == 0 {
                bits = splitmix64(&mut state);
            }
            let r = ((bits >> ((p % 16) * 4)) & 0xF) as i32;
            let delta = if noise == 0 {
                0
            } else {
                r % (2 * noise + 1) - noise
            };
            out.push((colour[p % c] as i32 + delta).clamp(0, 255) as u8);
        }
        out
    }

    pub fn expected_shots(&self) -> Vec<Shot> {
        (0..self.shots)
            .map(|s| Shot {
                start_frame: s * self.frames_per_shot,
                end_frame: (s + 1) * self.frames_per_shot - 1,
                keyframe: s * self.frames_per_shot,
            })
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let colours = self.shot_colours();
        let frames = (0..self.frame_count()).map(|i| self.frame(&colours, i));
        let header = self.header();
        write_owned(path.as_ref(), &header, frames)?;
        Ok(())
    }
}

fn write_owned(
    path: &Path,
    header: &StreamHeader,
    frames: impl Iterator<Item = Vec<u8>>,
) -> Result<()> {
    // Stream frames out in chunks so large fixtures never sit in memory.
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&header.encode())?;
    for f in frames {
        if f.len() != header.frame_len() {
            return Err(DataError::BadDimensions(format!(
                "frame of {} bytes, header says {}",
                f.len(),
                header.frame_len()
            ))
            .into());
        }
        w.write_all(&f)?;
    }
    w.flush()?;
    Ok(())
}

/// `n` random vectors in `[-1, 1)^dim` from the splitmix stream.
pub fn random_vectors(n: usize, dim: u32, seed: u64) -> Vec<FeatureVector> {
    let mut state = seed;
    (0..n as u64)
        .map(|id| {
            let values = (0..dim).map(|_| unit_f32(splitmix64(&mut state))).collect();
            FeatureVector::new(id, values)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Pipeline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PipelineMode {
    Index,
    Query,
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub model_id: String,
    pub stream_path: PathBuf,
    /// Written in index mode, read in query mode.
    pub index_path: Option<PathBuf>,
    pub mode: PipelineMode,
    /// Query mode: frames to query. Empty means every shot keyframe.
    pub query_frames: Vec<u32>,
    pub slo_ms: f32,
    pub percentile: Percentile,
    pub threshold: f32,
    pub min_shot_len: usize,
    pub k: usize,
    pub deadline_ms: f32,
    /// Overrides the planned batch size.
    pub batch_size: Option<u32>,
    /// Send every frame instead of one keyframe per shot.
    pub all_frames: bool,
    pub image_side: u32,
    pub metric: Metric,
    pub device_tag: String,
}

impl PipelineConfig {
    pub fn new(model_id: impl Into<String>, stream_path: impl Into<PathBuf>) -> Self {
        Self {
            model_id: model_id.into(),
            stream_path: stream_path.into(),
            index_path: None,
            mode: PipelineMode::Index,
            query_frames: Vec::new(),
            slo_ms: DEFAULT_SLO_MS,
            percentile: Percentile::P95,
            threshold: DEFAULT_THRESHOLD,
            min_shot_len: DEFAULT_MIN_SHOT_LEN,
            k: 10,
            deadline_ms: DEFAULT_DEADLINE_MS,
            batch_size: None,
            all_frames: false,
            image_side: crate::executors::DEFAULT_IMAGE_SIDE,
            metric: Metric::Cosine,
            device_tag: DEFAULT_DEVICE.to_string(),
        }
    }
}

/// Where batches are executed.
pub enum Backend {
    InProcess(Arc<ModelService>),
    Remote(Client),
}

impl Backend {
    fn infer(&mut self, model_id: &str, items: Vec<(u64, Tensor)>) -> Result<Vec<InferenceOutput>> {
        match self {
            Backend::InProcess(svc) => {
                let refs: Vec<(u64, &Tensor)> = items.iter().map(|(id, t)| (*id, t)).collect();
                Ok(svc.infer(model_id, &refs)?)
            }
            Backend::Remote(client) => Ok(client.infer(model_id, items)?),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StreamInfo {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub frame_count: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchInfo {
    pub batch_id: u64,
    pub size: usize,
    pub trigger: BatchTrigger,
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineTiming {
    pub wall_ms: f64,
    pub scan_ms: f64,
    pub infer_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineReport {
    pub model_id: String,
    pub mode: PipelineMode,
    pub stream: StreamInfo,
    pub shots: Vec<Shot>,
    pub requests: usize,
    pub batch_size: u32,
    /// "override", "profile" or "default".
    pub batch_size_source: String,
    pub batches: Vec<BatchInfo>,
    pub features_indexed: usize,
    pub index_path: Option<PathBuf>,
    pub matches: Vec<MatchResult>,
    pub timing: PipelineTiming,
}

/// Batch size from the override, the profile cache, or the default.
pub fn resolve_batch_size(config: &PipelineConfig, cache: Option<&ProfileCache>) -> (u32, String) {
    if let Some(b) = config.batch_size {
        return (b.max(1), "override".into());
    }
    if let Some(cache) = cache {
        let policy = SloPolicy::new(config.model_id.clone(), config.slo_ms, config.percentile);
        if let Ok(plan) = cache.plan_batch(&config.model_id, &policy, &config.device_tag) {
            return (plan.batch_size, "profile".into());
        }
    }
    (DEFAULT_BATCH_SIZE, "default".into())
}

fn frame_tensor(stream: &FrameStream, index: u32, side: u32) -> Result<Tensor> {
    let h = stream.header();
    let raw = stream.frame(index)?;
    let rgb = if h.channels == 1 {
        gray_to_rgb(&raw)
    } else {
        raw
    };
    Ok(preprocess_image(&rgb, h.height, h.width, 3, side, side)?)
}

pub fn run_pipeline(
    config: &PipelineConfig,
    backend: &mut Backend,
    cache: Option<&ProfileCache>,
) -> Result<PipelineReport> {
    let t0 = Instant::now();
    if config.k == 0 {
        return Err(Error::Usage("k must be >= 1".into()));
    }
    let stream = read_stream(&config.stream_path)?;
    let shots = detect_shots(&stream, config.threshold, config.min_shot_len)?;
    let scan_ms = t0.elapsed().as_secs_f64() * 1000.0;
    let h = *stream.header();

    // (feature id, frame index) pairs to send.
    let selected: Vec<(u64, u32)> = match config.mode {
        PipelineMode::Query if !config.query_frames.is_empty() => {
            for &f in &config.query_frames {
                if f >= h.frame_count {
                    return Err(Error::Usage(format!(
                        "query frame {f} outside stream of {} frames",
                        h.frame_count
                    )));
                }
            }
            config.query_frames.iter().map(|&f| (f as u64, f)).collect()
        }
        PipelineMode::Query => shots
            .iter()
            .map(|s| (s.keyframe as u64, s.keyframe))
            .collect(),
        PipelineMode::Index if config.all_frames => {
            (0..h.frame_count).map(|f| (f as u64, f)).collect()
        }
        PipelineMode::Index => shots
            .iter()
            .enumerate()
            .map(|(i, s)| (i as u64, s.keyframe))
            .collect(),
    };

    let (batch_size, batch_size_source) = resolve_batch_size(config, cache);
    let mut queue = BatchQueue::new(config.model_id.clone(), None, batch_size as usize);
    let clock = Instant::now();
    let now = || clock.elapsed().as_secs_f64() * 1000.0;

    let mut batches = Vec::new();
    let mut outputs: Vec<InferenceOutput> = Vec::with_capacity(selected.len());
    let mut infer_ms = 0.0;
    let mut run_batches = |formed: Vec<crate::data_engine::InferenceBatch>,
                           batches: &mut Vec<BatchInfo>,
                           outputs: &mut Vec<InferenceOutput>|
     -> Result<()> {
        for b in formed {
            batches.push(BatchInfo {
                batch_id: b.batch_id,
                size: b.len(),
                trigger: b.trigger,
            });
            let ids = b.request_ids();
            let items: Vec<(u64, Tensor)> = b
                .requests
                .into_iter()
                .map(|r| (r.request_id, r.payload))
                .collect();
            let t = Instant::now();
            let out = backend.infer(&config.model_id, items)?;
            infer_ms += t.elapsed().as_secs_f64() * 1000.0;
            let got: Vec<u64> = out.iter().map(|o| o.request_id).collect();
            if got != ids {
                return Err(Error::Usage(format!(
                    "server answered ids {got:?} for batch {ids:?}"
                )));
            }
            outputs.extend(out);
        }
        Ok(())
    };

    for &(id, frame) in &selected {
        let tensor = frame_tensor(&stream, frame, config.image_side)?;
        let req = InferenceRequest::new(id, config.model_id.clone(), tensor, config.deadline_ms);
        let formed = queue.submit(req, now())?;
        run_batches(formed, &mut batches, &mut outputs)?;
    }
    let formed = queue.drain(now());
    run_batches(formed, &mut batches, &mut outputs)?;

    let features: Vec<FeatureVector> = outputs.iter().filter_map(|o| o.feature.clone()).collect();
    let mut features_indexed = 0;
    let mut matches = Vec::new();
    match config.mode {
        PipelineMode::Index => {
            if let Some(first) = features.first() {
                let mut index = FlatIndex::new(first.dim(), config.metric)?;
                features_indexed = index.add(&features)?;
                if let Some(path) = &config.index_path {
                    index.save(path)?;
                }
            } else if !selected.is_empty() && config.index_path.is_some() {
                tracing::warn!(model_id = %config.model_id, "model returned no features; nothing indexed");
            }
        }
        PipelineMode::Query => {
            let path = config
                .index_path
                .as_ref()
                .ok_or_else(|| Error::Usage("query mode needs an index path".into()))?;
            let index = FlatIndex::load(path)?;
            for f in &features {
                matches.push(index.search(f, config.k)?);
            }
        }
    }

    Ok(PipelineReport {
        model_id: config.model_id.clone(),
        mode: config.mode,
        stream: StreamInfo {
            width: h.width,
            height: h.height,
            channels: h.channels,
            frame_count: h.frame_count,
        },
        shots,
        requests: selected.len(),
        batch_size,
        batch_size_source,
        batches,
        features_indexed,
        index_path: config.index_path.clone(),
        matches,
        timing: PipelineTiming {
            wall_ms: t0.elapsed().as_secs_f64() * 1000.0,
            scan_ms,
            infer_ms,
        },
    })
}

// ---------------------------------------------------------------------------
// Benchmarks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct DecodeBench {
    pub width: u32,
    pub height: u32,
    pub frames: u32,
    pub seconds: f64,
    pub fps: f64,
}

/// Full read + histogram pass over an existing stream.
pub fn bench_decode_file(path: impl AsRef<Path>) -> Result<DecodeBench> {
    let start = Instant::now();
    let stream = read_stream(path)?;
    let h = *stream.header();
    let mut checksum = 0u64;
    stream.for_each_frame(|_, frame| {
        let hist = frame_histogram(frame, h.channels as usize);
        checksum = checksum.wrapping_add(hist[0] as u64);
        Ok(())
    })?;
    std::hint::black_box(checksum);
    let seconds = start.elapsed().as_secs_f64();
    Ok(DecodeBench {
        width: h.width,
        height: h.height,
        frames: h.frame_count,
        seconds,
        fps: h.frame_count as f64 / seconds.max(1e-9),
    })
}

/// Synthesises a `width×height` rgb8 stream in `dir` and scans it.
pub fn bench_decode(
    dir: &Path,
    width: u32,
    height: u32,
    frames: u32,
    seed: u64,
) -> Result<DecodeBench> {
    let spec = SynthSpec {
        width,
        height,
        pix_fmt: PixFmt::Rgb8,
        shots: frames.div_ceil(100).max(1),
        frames_per_shot: 100.min(frames.max(1)),
        noise: 2,
        seed,
    };
    let path = dir.join("bench_decode.hyf");
    spec.write(&path)?;
    let out = bench_decode_file(&path);
    let _ = std::fs::remove_file(&path);
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct KeyframeRun {
    pub requests: usize,
    pub batches: usize,
    pub shots: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct KeyframeBench {
    pub frames: u32,
    pub keyframe: KeyframeRun,
    pub all_frames: KeyframeRun,
    pub speedup: f64,
}

/// Keyframe mode vs all-frames mode through the in-process pipeline with a
/// synthetic-latency model.
pub fn bench_keyframe(
    dir: &Path,
    spec: &SynthSpec,
    params: SyntheticLatencyParams,
    batch_size: u32,
) -> Result<KeyframeBench> {
    let path = dir.join("bench_keyframe.hyf");
    spec.write(&path)?;
    let exec = Arc::new(SyntheticLatency::new(params, spec.seed)?);
    let svc = Arc::new(ModelService::new(None).with_model("synthetic", exec));
    let mut backend = Backend::InProcess(svc);
    let mut run = |all_frames: bool| -> Result<KeyframeRun> {
        let mut cfg = PipelineConfig::new("synthetic", &path);
        cfg.batch_size = Some(batch_size);
        cfg.all_frames = all_frames;
        let start = Instant::now();
        let r = run_pipeline(&cfg, &mut backend, None)?;
        Ok(KeyframeRun {
            requests: r.requests,
            batches: r.batches.len(),
            shots: r.shots.len(),
            wall_ms: start.elapsed().as_secs_f64() * 1000.0,
        })
    };
    let keyframe = run(false)?;
    let all_frames = run(true)?;
    let _ = std::fs::remove_file(&path);
    Ok(KeyframeBench {
        frames: spec.frame_count(),
        speedup: all_frames.wall_ms / keyframe.wall_ms.max(1e-9),
        keyframe,
        all_frames,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchCurvePoint {
    pub batch_size: u32,
    pub lat_mean_ms: f32,
    pub lat_p95_ms: f32,
    pub throughput_ips: f32,
    pub model_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchCurveBench {
    pub params: SyntheticLatencyParams,
    pub points: Vec<BatchCurvePoint>,
    pub argmax_throughput: u32,
    pub analytic_argmax: f32,
    pub latency_non_decreasing: bool,
}

pub fn bench_batchcurve(
    params: SyntheticLatencyParams,
    max_batch: u32,
    iterations: usize,
    warmup: usize,
    seed: u64,
) -> Result<BatchCurveBench> {
    let exec = SyntheticLatency::new(params, seed)?;
    let config = ProfileConfig {
        batch_sizes: (1..=max_batch as usize).collect(),
        warmup,
        iterations,
        device_tag: DEFAULT_DEVICE.to_string(),
    };
    let run = profile_model("synthetic", &exec, &config, None)?;
    if let Some(e) = run.failure {
        return Err(e.into());
    }
    Ok(summarize_curve(params, &run.records))
}

pub fn summarize_curve(
    params: SyntheticLatencyParams,
    records: &[ProfileRecord],
) -> BatchCurveBench {
    let points: Vec<BatchCurvePoint> = records
        .iter()
        .map(|r| BatchCurvePoint {
            batch_size: r.batch_size,
            lat_mean_ms: r.lat_mean_ms,
            lat_p95_ms: r.lat_p95_ms,
            throughput_ips: r.throughput_ips,
            model_ms: params.model_ms(r.batch_size as usize),
        })
        .collect();
    let argmax_throughput = points
        .iter()
        .fold(None::<&BatchCurvePoint>, |best, p| match best {
            Some(b) if b.throughput_ips >= p.throughput_ips => Some(b),
            _ => Some(p),
        })
        .map(|p| p.batch_size)
        .unwrap_or(0);
    BatchCurveBench {
        params,
        latency_non_decreasing: points
            .windows(2)
            .all(|w| w[1].lat_mean_ms >= w[0].lat_mean_ms),
        analytic_argmax: if params.q_ms > 0.0 {
            (params.a_ms / params.q_ms).sqrt()
        } else {
            f32::INFINITY
        },
        points,
        argmax_throughput,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MatchBench {
    pub n: usize,
    pub dim: u32,
    pub k: usize,
    pub queries: usize,
    pub shards: usize,
    pub build_ms: f64,
    pub single_mean_ms: f64,
    pub single_p95_ms: f64,
    pub sharded_mean_ms: f64,
    pub sharded_p95_ms: f64,
    /// Sharded results equal single-threaded results for every query.
    pub sharded_agrees: bool,
}

fn mean_p95(samples: &mut [f64]) -> (f64, f64) {
    samples.sort_by(|a, b| a.total_cmp(b));
    let mean = samples.iter().sum::<f64>() / samples.len().max(1) as f64;
    let idx = ((0.95 * samples.len() as f64).ceil() as usize).saturating_sub(1);
    (mean, samples.get(idx).copied().unwrap_or(0.0))
}

pub fn bench_match(
    n: usize,
    dim: u32,
    k: usize,
    queries: usize,
    shards: usize,
    seed: u64,
) -> Result<MatchBench> {
    let start = Instant::now();
    let mut index = FlatIndex::new(dim, Metric::Cosine)?;
    index.add(&random_vectors(n, dim, seed))?;
    let build_ms = start.elapsed().as_secs_f64() * 1000.0;
    let qs = random_vectors(queries.max(1), dim, seed ^ 0xA5A5_A5A5);

    let mut single = Vec::with_capacity(qs.len());
    let mut sharded = Vec::with_capacity(qs.len());
    let mut agrees = true;
    for q in &qs {
        let t = Instant::now();
        let a = index.search(q, k)?;
        single.push(t.elapsed().as_secs_f64() * 1000.0);
        let t = Instant::now();
        let b = index.search_sharded(q, k, shards)?;
        sharded.push(t.elapsed().as_secs_f64() * 1000.0);
        agrees &= a == b;
    }
    let (single_mean_ms, single_p95_ms) = mean_p95(&mut single);
    let (sharded_mean_ms, sharded_p95_ms) = mean_p95(&mut sharded);
    Ok(MatchBench {
        n,
        dim,
        k,
        queries: qs.len(),
        shards,
        build_ms,
        single_mean_ms,
        single_p95_ms,
        sharded_mean_ms,
        sharded_p95_ms,
        sharded_agrees: agrees,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executors::HistogramEmbedding;

    fn embed_service() -> Backend {
        let exec = Arc::new(HistogramEmbedding::new(0, 128).unwrap());
        Backend::InProcess(Arc::new(ModelService::new(None).with_model("emb", exec)))
    }

    #[test]
    fn synth_fixture_has_expected_shots() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::default();
        let path = dir.path().join("s.hyf");
        spec.write(&path).unwrap();
        let stream = read_stream(&path).unwrap();
        let shots = detect_shots(&stream, DEFAULT_THRESHOLD, DEFAULT_MIN_SHOT_LEN).unwrap();
        assert_eq!(shots, spec.expected_shots());
    }

    #[test]
    fn gray_fixture_colours_alternate() {
        let spec = SynthSpec {
            pix_fmt: PixFmt::Gray8,
            shots: 40,
            ..Default::default()
        };
        let c = spec.shot_colours();
        assert_eq!(c.len(), 40);
        assert!(c.windows(2).all(|w| w[0][0] != w[1][0]));
    }

    #[test]
    fn index_then_query_self_matches() {
        let dir = tempfile::tempdir().unwrap();
        let stream = dir.path().join("s.hyf");
        let index = dir.path().join("s.hyix");
        SynthSpec::default().write(&stream).unwrap();
        let mut backend = embed_service();

        let mut cfg = PipelineConfig::new("emb", &stream);
        cfg.index_path = Some(index.clone());
        let report = run_pipeline(&cfg, &mut backend, None).unwrap();
        assert_eq!(report.shots.len(), 3);
        assert_eq!(report.features_indexed, 3);
        assert_eq!(report.batches.len(), 1);
        assert_eq!(report.batches[0].trigger, BatchTrigger::Drain);

        cfg.mode = PipelineMode::Query;
        cfg.query_frames = vec![75];
        cfg.k = 3;
        let report = run_pipeline(&cfg, &mut backend, None).unwrap();
        let top = report.matches[0].neighbors[0];
        assert_eq!(top.id, 2);
        assert!(top.score >= 0.99);
    }

    #[test]
    fn missing_stream_is_an_io_error() {
        let cfg = PipelineConfig::new("emb", "/nonexistent/x.hyf");
        let err = run_pipeline(&cfg, &mut embed_service(), None).unwrap_err();
        assert_eq!(err.exit_code(), crate::ExitCode::Io);
    }

    #[test]
    fn batch_size_resolution_order() {
        let mut cfg = PipelineConfig::new("m", "x");
        assert_eq!(resolve_batch_size(&cfg, None).0, DEFAULT_BATCH_SIZE);
        cfg.batch_size = Some(3);
        assert_eq!(resolve_batch_size(&cfg, None), (3, "override".into()));
    }
}
