//! The `v2r` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use v2r_core::ExitCode;

fn v2r(home: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_v2r"))
        .arg("--home")
        .arg(home)
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("spawn v2r")
}

fn json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

/// Drops wall-clock fields so runs can be compared.
fn strip_timing(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.retain(|k, _| {
                !(k == "timing" || k.ends_with("_ms") || k == "speedup" || k == "registered_at")
            });
            map.values_mut().for_each(strip_timing);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        let stream = f.path("s.hyf");
        json(&f.run(&["--json", "synth", "--out", &stream]));
        json(&f.run(&[
            "--json",
            "model",
            "register",
            "--id",
            "emb",
            "--task",
            "embedding",
        ]));
        f
    }

    fn path(&self, name: &str) -> String {
        self.dir.path().join(name).to_string_lossy().into_owned()
    }

    fn run(&self, args: &[&str]) -> Output {
        v2r(&self.dir.path().join("home"), args)
    }
}

#[test]
fn exit_code_table_is_stable() {
    let table: Vec<(u8, &str)> = ExitCode::ALL.iter().map(|c| (c.code(), c.name())).collect();
    assert_eq!(
        table,
        vec![
            (0, "ok"),
            (2, "usage"),
            (3, "io"),
            (4, "registry"),
            (5, "executor"),
            (6, "profiler"),
            (7, "orchestrator"),
            (8, "data-engine"),
            (9, "server"),
            (10, "matching"),
            (11, "monitor"),
        ]
    );
    // The README documents the same table.
    let readme =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md")).unwrap();
    for (code, name) in table {
        let row = format!("| {code} | `{name}` |");
        assert!(readme.contains(&row), "README lacks row {row}");
    }
}

#[test]
fn error_families_map_to_codes() {
    let f = Fixture::new();
    std::fs::write(f.path("bad.hyix"), b"garbage").unwrap();
    std::fs::write(f.path("bad.hyf"), b"HYF1xxxx").unwrap();
    let cases: Vec<(Vec<String>, ExitCode)> = vec![
        (vec!["frobnicate".into()], ExitCode::Usage),
        (
            vec![
                "pipeline".into(),
                "--stream".into(),
                f.path("missing.hyf"),
                "--model".into(),
                "emb".into(),
            ],
            ExitCode::Io,
        ),
        (
            vec![
                "pipeline".into(),
                "--stream".into(),
                f.path("s.hyf"),
                "--model".into(),
                "ghost".into(),
            ],
            ExitCode::Registry,
        ),
        (
            vec![
                "profile".into(),
                "--model".into(),
                "emb".into(),
                "--iters".into(),
                "3".into(),
            ],
            ExitCode::Profiler,
        ),
        (
            vec![
                "plan".into(),
                "--model".into(),
                "emb".into(),
                "--slo-ms".into(),
                "50".into(),
            ],
            ExitCode::Orchestrator,
        ),
        (
            vec!["ingest".into(), "--stream".into(), f.path("bad.hyf")],
            ExitCode::DataEngine,
        ),
        (
            vec!["status".into(), "--master".into(), "127.0.0.1:1".into()],
            ExitCode::Server,
        ),
        (
            vec![
                "match".into(),
                "--index".into(),
                f.path("bad.hyix"),
                "--query-file".into(),
                f.path("bad.hyix"),
            ],
            ExitCode::Matching,
        ),
    ];
    for (args, expect) in cases {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = f.run(&args);
        assert_eq!(out.status.code(), Some(expect.code() as i32), "{args:?}");
        let stderr = String::from_utf8_lossy(&out.stderr);
        assert!(
            !stderr.trim().is_empty(),
            "{args:?} printed nothing on stderr"
        );
        assert!(out.stdout.is_empty(), "{args:?} wrote to stdout");
    }
}

#[test]
fn pipeline_index_then_self_match() {
    let f = Fixture::new();
    let (stream, index) = (f.path("s.hyf"), f.path("i.hyix"));
    let report = json(&f.run(&[
        "--json",
        "pipeline",
        "--stream",
        &stream,
        "--model",
        "emb",
        "--in-process",
        "--index",
        &index,
    ]));
    assert_eq!(report["shots"].as_array().unwrap().len(), 3);
    assert_eq!(report["features_indexed"], 3);
    for b in report["batches"].as_array().unwrap() {
        assert!(["size", "timeout", "drain"].contains(&b["trigger"].as_str().unwrap()));
    }

    let report = json(&f.run(&[
        "--json",
        "pipeline",
        "--stream",
        &stream,
        "--model",
        "emb",
        "--in-process",
        "--index",
        &index,
        "--mode",
        "query",
        "--query-frame",
        "45",
    ]));
    let top = &report["matches"][0]["neighbors"][0];
    assert_eq!(top["id"], 1, "{report}");
    assert!(top["score"].as_f64().unwrap() >= 0.99);
}

#[test]
fn fixed_seed_runs_are_reproducible() {
    let runs: Vec<Value> = (0..2)
        .map(|_| {
            let f = Fixture::new();
            let (stream, index) = (f.path("s.hyf"), f.path("i.hyix"));
            let mut all = Vec::new();
            for args in [
                vec![
                    "--seed", "42", "--json", "synth", "--out", &stream, "--shots", "4",
                ],
                vec![
                    "--seed", "42", "--json", "pipeline", "--stream", &stream, "--model", "emb",
                    "--index", &index,
                ],
                vec![
                    "--seed", "42", "--json", "pipeline", "--stream", &stream, "--model", "emb",
                    "--index", &index, "--mode", "query",
                ],
                vec![
                    "--seed", "42", "--json", "bench", "keyframe", "--a-ms", "1", "--s-ms", "0",
                    "--q-ms", "0",
                ],
            ] {
                let mut v = json(&f.run(&args));
                strip_timing(&mut v);
                // Paths differ between the two temp dirs.
                if let Value::Object(m) = &mut v {
                    m.remove("out");
                    m.remove("index_path");
                }
                all.push(v);
            }
            Value::Array(all)
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn bench_keyframe_counts_requests() {
    let f = Fixture::new();
    let v = json(&f.run(&["--json", "bench", "keyframe", "--a-ms", "2"]));
    assert_eq!(v["keyframe"]["requests"], 3);
    assert_eq!(v["all_frames"]["requests"], 90);
    assert_eq!(v["frames"], 90);
}

#[test]
fn bench_match_reports_latency() {
    let f = Fixture::new();
    let v = json(&f.run(&[
        "--json",
        "bench",
        "match",
        "--n",
        "5000",
        "--dim",
        "32",
        "--queries",
        "5",
    ]));
    for key in ["single_mean_ms", "single_p95_ms", "sharded_mean_ms"] {
        assert!(v[key].as_f64().unwrap() > 0.0, "{key}");
    }
    assert_eq!(v["n"], 5000);
    assert_eq!(v["sharded_agrees"], true);
}

#[test]
fn bench_batchcurve_peaks_near_thirteen() {
    let f = Fixture::new();
    let v = json(&f.run(&[
        "--json",
        "bench",
        "batchcurve",
        "--max-batch",
        "24",
        "--iters",
        "5",
        "--warmup",
        "1",
    ]));
    let argmax = v["argmax_throughput"].as_u64().unwrap();
    assert!((11..=15).contains(&argmax), "{v}");
}
