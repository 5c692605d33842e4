//! `v2r` command-line entry point. Reports go to stdout as JSON; logs and
//! errors go to stderr.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use v2r_core::data_engine::{
    detect_shots, preprocess_text, read_stream, PixFmt, DEFAULT_MIN_SHOT_LEN, DEFAULT_THRESHOLD,
};
use v2r_core::executors::{executor_for_manifest, SyntheticLatencyParams};
use v2r_core::matching::{read_feature_file, FlatIndex, Metric, SharedIndex};
use v2r_core::monitor::{Monitor, DEFAULT_TTL_MS};
use v2r_core::orchestrator::{Percentile, SloPolicy};
use v2r_core::pipeline::{
    bench_batchcurve, bench_decode, bench_keyframe, bench_match, run_pipeline, Backend, Home,
    PipelineConfig, PipelineMode, SynthSpec,
};
use v2r_core::profiler::{profile_model, ProfileConfig, DEFAULT_DEVICE};
use v2r_core::registry::{ModelDraft, Task, VersionSel};
use v2r_core::server::{serve, Client, FeatureSink, FileIndexSink, ModelService, ServerConfig};
use v2r_core::{Error, ExitCode, TensorSpec};

type CliResult = Result<serde_json::Value, Error>;

#[derive(Parser, Debug)]
#[command(name = "v2r", version, about = "Video-to-retail serving kernel")]
struct Cli {
    /// State directory (registry, profile cache). Defaults to $V2R_HOME or ./.v2r
    #[arg(long, global = true)]
    home: Option<PathBuf>,
    /// Seed for every deterministic component.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Compact single-line JSON instead of pretty output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Copy)]
struct SynthArgs {
    /// Synthetic executor fixed cost (ms).
    #[arg(long, default_value_t = 8.0)]
    a_ms: f32,
    /// Synthetic executor per-item cost (ms).
    #[arg(long, default_value_t = 0.5)]
    s_ms: f32,
    /// Synthetic executor quadratic cost (ms).
    #[arg(long, default_value_t = 0.05)]
    q_ms: f32,
    #[arg(long, default_value_t = 0.0)]
    jitter: f32,
}

impl From<SynthArgs> for SyntheticLatencyParams {
    fn from(a: SynthArgs) -> Self {
        SyntheticLatencyParams {
            a_ms: a.a_ms,
            s_ms: a.s_ms,
            q_ms: a.q_ms,
            jitter_frac: a.jitter,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Model repository operations.
    Model {
        #[command(subcommand)]
        action: ModelCmd,
    },
    /// Profile a registered model across batch sizes.
    Profile {
        #[arg(long)]
        model: String,
        #[arg(long, default_value = "latest")]
        version: VersionSel,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8, 16, 32, 64])]
        batches: Vec<usize>,
        #[arg(long, default_value_t = 30)]
        iters: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        #[arg(long, default_value = DEFAULT_DEVICE)]
        device: String,
        /// Also write the records here as JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Choose a batch size from cached profiles under an SLO.
    Plan {
        #[arg(long)]
        model: String,
        #[arg(long)]
        slo_ms: f32,
        #[arg(long, default_value = "p95")]
        percentile: Percentile,
        #[arg(long, default_value = DEFAULT_DEVICE)]
        device: String,
    },
    /// Run the model server.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<String>,
        /// Append produced features to this HYFV file.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long, default_value = "worker-0")]
        worker_id: String,
        /// Self-publish status every N ms (0 disables).
        #[arg(long, default_value_t = 1000)]
        publish_ms: u64,
        /// Stop after this many seconds instead of running until killed.
        #[arg(long)]
        duration_secs: Option<u64>,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Scan a stream: shots, keyframes and (optionally) subtitle tokens.
    Ingest {
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        model: Option<String>,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f32,
        #[arg(long, default_value_t = DEFAULT_MIN_SHOT_LEN)]
        min_shot_len: usize,
        /// SRT subtitle file to tokenize alongside the stream.
        #[arg(long)]
        subtitles: Option<PathBuf>,
    },
    /// Search an index, or build one from a feature file.
    Match {
        #[arg(long)]
        index: PathBuf,
        /// Query vectors (HYFV).
        #[arg(long, conflicts_with = "build_from")]
        query_file: Option<PathBuf>,
        /// Build `--index` from this HYFV file instead of searching.
        #[arg(long)]
        build_from: Option<PathBuf>,
        #[arg(long, default_value = "cosine")]
        metric: Metric,
        #[arg(long, default_value_t = 10)]
        k: usize,
        /// Split each scan over this many shards.
        #[arg(long, default_value_t = 1)]
        shards: usize,
    },
    /// Query a master for its cluster snapshot.
    Status {
        #[arg(long, default_value = "127.0.0.1:7878")]
        master: String,
        #[arg(long, default_value_t = DEFAULT_TTL_MS)]
        ttl_ms: u32,
    },
    /// End-to-end stream → features → index/search.
    Pipeline(PipelineArgs),
    /// Benchmarks backing the performance claims.
    Bench {
        #[command(subcommand)]
        suite: BenchCmd,
    },
    /// Write a synthetic shot stream.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        shots: u32,
        #[arg(long, default_value_t = 30)]
        frames_per_shot: u32,
        #[arg(long, default_value_t = 64)]
        width: u32,
        #[arg(long, default_value_t = 64)]
        height: u32,
        #[arg(long)]
        gray: bool,
        #[arg(long, default_value_t = 2)]
        noise: u8,
    },
}

#[derive(Subcommand, Debug)]
enum ModelCmd {
    Register {
        #[arg(long)]
        id: String,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        task: Task,
        #[arg(long, default_value = "f32:batch,64,64,3")]
        input_spec: TensorSpec,
        #[arg(long, default_value = "f32:batch,128")]
        output_spec: TensorSpec,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        version: Option<u32>,
    },
    List,
    /// Hide a version from `latest` resolution.
    Tombstone {
        #[arg(long)]
        id: String,
        #[arg(long)]
        version: u32,
    },
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long)]
    stream: PathBuf,
    #[arg(long)]
    model: String,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModeArg::Index)]
    mode: ModeArg,
    /// Frames to query in query mode (default: every shot keyframe).
    #[arg(long, value_delimiter = ',')]
    query_frame: Vec<u32>,
    #[arg(long, conflicts_with = "connect")]
    in_process: bool,
    #[arg(long)]
    connect: Option<String>,
    #[arg(long, default_value_t = v2r_core::pipeline::DEFAULT_SLO_MS)]
    slo_ms: f32,
    #[arg(long, default_value = "p95")]
    percentile: Percentile,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f32,
    #[arg(long, default_value_t = DEFAULT_MIN_SHOT_LEN)]
    min_shot_len: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = v2r_core::pipeline::DEFAULT_DEADLINE_MS)]
    deadline_ms: f32,
    #[arg(long)]
    batch_size: Option<u32>,
    #[arg(long)]
    all_frames: bool,
    #[arg(long, default_value = DEFAULT_DEVICE)]
    device: String,
    #[command(flatten)]
    synth: SynthArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum ModeArg {
    Index,
    Query,
}

#[derive(Subcommand, Debug)]
enum BenchCmd {
    /// Raw-frame scan throughput.
    Decode {
        #[arg(long, default_value_t = 320)]
        width: u32,
        #[arg(long, default_value_t = 180)]
        height: u32,
        #[arg(long, default_value_t = 2000)]
        frames: u32,
        /// Scan this stream instead of a synthesised one.
        #[arg(long)]
        stream: Option<PathBuf>,
    },
    /// Keyframe mode vs all-frames mode.
    Keyframe {
        #[arg(long, default_value_t = 3)]
        shots: u32,
        #[arg(long, default_value_t = 30)]
        frames_per_shot: u32,
        #[arg(long, default_value_t = 8)]
        batch_size: u32,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Latency and throughput per batch size.
    Batchcurve {
        #[arg(long, default_value_t = 32)]
        max_batch: u32,
        #[arg(long, default_value_t = 10)]
        iters: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
        #[command(flatten)]
        synth: SynthArgs,
    },
    /// Search latency against index size.
    Match {
        #[arg(long, default_value_t = 100_000)]
        n: usize,
        #[arg(long, default_value_t = 128)]
        dim: u32,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 50)]
        queries: usize,
        #[arg(long)]
        shards: Option<usize>,
    },
}

fn to_json(v: impl Serialize) -> CliResult {
    serde_json::to_value(v).map_err(|e| Error::Io(std::io::Error::other(e)))
}

fn build_service(
    home: &Home,
    models: &[String],
    seed: u64,
    synth: SyntheticLatencyParams,
    sink: Option<Arc<dyn FeatureSink>>,
) -> Result<ModelService, Error> {
    let registry = home.registry()?;
    let mut svc = ModelService::new(sink);
    for id in models {
        let manifest = registry.get_model(id, VersionSel::Latest)?;
        svc.add_model(id.clone(), executor_for_manifest(&manifest, seed, synth)?);
    }
    Ok(svc)
}

fn run(cli: Cli) -> CliResult {
    let home = Home::resolve(cli.home.clone());
    match cli.command {
        Command::Model { action } => match action {
            ModelCmd::Register {
                id,
                name,
                task,
                input_spec,
                output_spec,
                weights,
                version,
            } => {
                let blob = weights.map(std::fs::read).transpose()?;
                let manifest = home.registry()?.register_model(
                    ModelDraft {
                        name: name.unwrap_or_else(|| id.clone()),
                        model_id: id,
                        task,
                        input_spec,
                        output_spec,
                        version,
                    },
                    blob.as_deref(),
                )?;
                to_json(manifest)
            }
            ModelCmd::List => to_json(home.registry()?.list()),
            ModelCmd::Tombstone { id, version } => {
                home.registry()?.tombstone(&id, version)?;
                to_json(
                    serde_json::json!({ "model_id": id, "version": version, "tombstone": true }),
                )
            }
        },
        Command::Profile {
            model,
            version,
            batches,
            iters,
            warmup,
            device,
            out,
            synth,
        } => {
            let manifest = home.registry()?.get_model(&model, version)?;
            let exec = executor_for_manifest(&manifest, cli.seed, synth.into())?;
            let cache = home.profile_cache()?;
            let config = ProfileConfig {
                batch_sizes: batches,
                warmup,
                iterations: iters,
                device_tag: device,
            };
            let run = profile_model(&model, exec.as_ref(), &config, Some(&cache))?;
            if let Some(path) = out {
                let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
                for r in &run.records {
                    serde_json::to_writer(&mut w, r).map_err(std::io::Error::other)?;
                    w.write_all(b"\n")?;
                }
                w.flush()?;
            }
            if let Some(e) = run.failure {
                return Err(e.into());
            }
            to_json(run.records)
        }
        Command::Plan {
            model,
            slo_ms,
            percentile,
            device,
        } => {
            let cache = home.profile_cache()?;
            let plan = cache.plan_batch(
                &model,
                &SloPolicy::new(model.clone(), slo_ms, percentile),
                &device,
            )?;
            to_json(plan)
        }
        Command::Serve {
            bind,
            models,
            features,
            workers,
            worker_id,
            publish_ms,
            duration_secs,
            synth,
        } => {
            let mut sink: Option<Arc<dyn FeatureSink>> = None;
            let probe = build_service(&home, &models, cli.seed, synth.into(), None)?;
            if let Some(path) = features {
                let dim = models
                    .iter()
                    .filter_map(|m| probe.executor(m)?.feature_dim())
                    .next();
                if let Some(dim) = dim {
                    let index = SharedIndex::new(FlatIndex::new(dim, Metric::Cosine)?);
                    sink = Some(Arc::new(FileIndexSink::open(path, dim, Some(index))?));
                }
            }
            let svc = build_service(&home, &models, cli.seed, synth.into(), sink)?;
            let mut config = ServerConfig {
                bind,
                worker_id,
                publish_interval_ms: (publish_ms > 0).then_some(publish_ms),
                ..Default::default()
            };
            if let Some(w) = workers {
                config.workers = w.max(1);
            }
            let handle = serve(config, Arc::new(svc), Some(Monitor::default()))?;
            let addr = handle.local_addr();
            eprintln!("listening on {addr}");
            match duration_secs {
                Some(s) => std::thread::sleep(Duration::from_secs(s)),
                None => loop {
                    std::thread::park();
                },
            }
            let served = handle.served();
            handle.shutdown();
            to_json(serde_json::json!({ "bind": addr.to_string(), "served": served }))
        }
        Command::Ingest {
            stream,
            model,
            threshold,
            min_shot_len,
            subtitles,
        } => {
            let s = read_stream(&stream)?;
            let shots = detect_shots(&s, threshold, min_shot_len)?;
            let tokens = match subtitles {
                Some(p) => Some(preprocess_text(&std::fs::read_to_string(p)?)),
                None => None,
            };
            let h = s.header();
            to_json(serde_json::json!({
                "stream": stream,
                "model_id": model,
                "width": h.width,
                "height": h.height,
                "channels": h.channels,
                "frame_count": h.frame_count,
                "shots": shots,
                "keyframes": shots.iter().map(|s| s.keyframe).collect::<Vec<_>>(),
                "requests": shots.len(),
                "tokens": tokens,
            }))
        }
        Command::Match {
            index,
            query_file,
            build_from,
            metric,
            k,
            shards,
        } => {
            if let Some(src) = build_from {
                let (dim, vectors) = read_feature_file(src)?;
                let mut idx = FlatIndex::new(dim, metric)?;
                let added = idx.add(&vectors)?;
                idx.save(&index)?;
                return to_json(
                    serde_json::json!({ "index": index, "dim": dim, "metric": metric.to_string(), "added": added }),
                );
            }
            let Some(qf) = query_file else {
                return Err(Error::Usage(
                    "match needs --query-file or --build-from".into(),
                ));
            };
            let idx = FlatIndex::load(&index)?;
            let (_, queries) = read_feature_file(qf)?;
            let results = queries
                .iter()
                .map(|q| idx.search_sharded(q, k, shards.max(1)))
                .collect::<Result<Vec<_>, _>>()?;
            to_json(results)
        }
        Command::Status { master, ttl_ms } => {
            let mut client = Client::connect(&master)?;
            to_json(client.status(ttl_ms)?)
        }
        Command::Pipeline(a) => {
            // Fail on a bad stream before touching the registry or a server.
            if !a.stream.is_file() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("stream {} not found", a.stream.display()),
                )));
            }
            v2r_core::data_engine::read_stream(&a.stream)?;
            let mut config = PipelineConfig::new(a.model.clone(), a.stream);
            config.index_path = a.index;
            config.mode = match a.mode {
                ModeArg::Index => PipelineMode::Index,
                ModeArg::Query => PipelineMode::Query,
            };
            config.query_frames = a.query_frame;
            config.slo_ms = a.slo_ms;
            config.percentile = a.percentile;
            config.threshold = a.threshold;
            config.min_shot_len = a.min_shot_len;
            config.k = a.k;
            config.deadline_ms = a.deadline_ms;
            config.batch_size = a.batch_size;
            config.all_frames = a.all_frames;
            config.device_tag = a.device;
            let mut backend = match (a.connect, a.in_process) {
                (Some(addr), _) => Backend::Remote(Client::connect(&addr)?),
                (None, _) => {
                    if !a.in_process {
                        tracing::info!("no --connect given; running in-process");
                    }
                    let svc = build_service(&home, &[a.model], cli.seed, a.synth.into(), None)?;
                    Backend::InProcess(Arc::new(svc))
                }
            };
            let cache = home.profile_cache().ok();
            to_json(run_pipeline(&config, &mut backend, cache.as_ref())?)
        }
        Command::Bench { suite } => match suite {
            BenchCmd::Decode {
                width,
                height,
                frames,
                stream,
            } => match stream {
                Some(p) => to_json(v2r_core::pipeline::bench_decode_file(p)?),
                None => {
                    let dir = tempfile_dir()?;
                    let r = bench_decode(&dir, width, height, frames, cli.seed);
                    let _ = std::fs::remove_dir_all(&dir);
                    to_json(r?)
                }
            },
            BenchCmd::Keyframe {
                shots,
                frames_per_shot,
                batch_size,
                synth,
            } => {
                let dir = tempfile_dir()?;
                let spec = SynthSpec {
                    shots,
                    frames_per_shot,
                    seed: cli.seed,
                    ..Default::default()
                };
                let r = bench_keyframe(&dir, &spec, synth.into(), batch_size);
                let _ = std::fs::remove_dir_all(&dir);
                to_json(r?)
            }
            BenchCmd::Batchcurve {
                max_batch,
                iters,
                warmup,
                synth,
            } => to_json(bench_batchcurve(
                synth.into(),
                max_batch,
                iters,
                warmup,
                cli.seed,
            )?),
            BenchCmd::Match {
                n,
                dim,
                k,
                queries,
                shards,
            } => {
                let shards = shards.unwrap_or_else(|| rayon::current_num_threads().max(4));
                to_json(bench_match(n, dim, k, queries, shards, cli.seed)?)
            }
        },
        Command::Synth {
            out,
            shots,
            frames_per_shot,
            width,
            height,
            gray,
            noise,
        } => {
            let spec = SynthSpec {
                width,
                height,
                pix_fmt: if gray { PixFmt::Gray8 } else { PixFmt::Rgb8 },
                shots,
                frames_per_shot,
                noise,
                seed: cli.seed,
            };
            spec.write(&out)?;
            to_json(
                serde_json::json!({ "out": out, "spec": spec, "expected_shots": spec.expected_shots() }),
            )
        }
    }
}

fn tempfile_dir() -> Result<PathBuf, Error> {
    let dir = std::env::temp_dir().join(format!("v2r-bench-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn main() -> std::process::ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .init();

    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                ExitCode::Usage.code()
            } else {
                0
            };
            let _ = e.print();
            return std::process::ExitCode::from(code);
        }
    };
    let compact = cli.json;
    match run(cli) {
        Ok(value) => {
            let text = if compact {
                serde_json::to_string(&value)
            } else {
                serde_json::to_string_pretty(&value)
            }
            .expect("json value serializes");
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{text}");
            std::process::ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.exit_code();
            eprintln!("error ({}): {e}", code.name());
            std::process::ExitCode::from(code.code())
        }
    }
}
