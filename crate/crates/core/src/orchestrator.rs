//! Profile cache and the SLO-constrained batch-size calculator.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::data_engine::BatchRouter;
use crate::profiler::ProfileRecord;

pub const PROFILE_CACHE_FILE: &str = "profiles.jsonl";

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid profile record: {0}")]
    InvalidRecord(String),
    #[error("no profile cached for model {model_id} on {device_tag}")]
    NoProfile {
        model_id: String,
        device_tag: String,
    },
    #[error("no batch queue for model {0}")]
    UnknownModelQueue(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("invalid SLO policy: {0}")]
    InvalidPolicy(String),
    #[error("profile cache I/O: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Percentile {
    P50,
    #[default]
    P95,
    P99,
}

impl Percentile {
    pub fn latency_of(self, r: &ProfileRecord) -> f32 {
        match self {
            Percentile::P50 => r.lat_p50_ms,
            Percentile::P95 => r.lat_p95_ms,
            Percentile::P99 => r.lat_p99_ms,
        }
    }
}

impl FromStr for Percentile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "p50" => Ok(Percentile::P50),
            "p95" => Ok(Percentile::P95),
            "p99" => Ok(Percentile::P99),
            other => Err(format!("unknown percentile {other:?} (p50|p95|p99)")),
        }
    }
}

impl fmt::Display for Percentile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Percentile::P50 => "p50",
            Percentile::P95 => "p95",
            Percentile::P99 => "p99",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SloPolicy {
    pub model_id: String,
    pub slo_ms: f32,
    #[serde(default)]
    pub percentile: Percentile,
}

impl SloPolicy {
    pub fn new(model_id: impl Into<String>, slo_ms: f32, percentile: Percentile) -> Self {
        Self {
            model_id: model_id.into(),
            slo_ms,
            percentile,
        }
    }

    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if self.slo_ms.is_finite() && self.slo_ms > 0.0 {
            Ok(())
        } else {
            Err(OrchestratorError::InvalidPolicy(format!(
                "slo_ms must be finite and > 0, got {}",
                self.slo_ms
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub batch_size: u32,
    pub measured_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub model_id: String,
    pub batch_size: u32,
    pub expected_latency_ms: f32,
    pub expected_throughput_ips: f32,
    pub slo_satisfied: bool,
    pub slo_ms: f32,
    pub percentile: Percentile,
    pub derived_from: Vec<Provenance>,
}

impl BatchPlan {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if self.batch_size == 0 {
            return Err(OrchestratorError::InvalidPlan(
                "batch_size must be >= 1".into(),
            ));
        }
        if self.slo_satisfied && self.expected_latency_ms > self.slo_ms {
            return Err(OrchestratorError::InvalidPlan(format!(
                "claims SLO satisfied but expects {} ms > {} ms",
                self.expected_latency_ms, self.slo_ms
            )));
        }
        Ok(())
    }
}

type CacheKey = (String, String, u32);

fn key_of(r: &ProfileRecord) -> CacheKey {
    (r.model_id.clone(), r.device_tag.clone(), r.batch_size)
}

/// In-memory profile table keyed by (model, device, batch size), optionally
/// backed by an append-only JSON-lines file.
#[derive(Debug, Default)]
pub struct ProfileCache {
    map: RwLock<BTreeMap<CacheKey, ProfileRecord>>,
    log: Option<Mutex<BufWriter<File>>>,
    path: Option<PathBuf>,
}

impl ProfileCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads `path` (if present) and appends subsequent puts to it.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, OrchestratorError> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut map = BTreeMap::new();
        if path.exists() {
            let lines: Vec<String> = BufReader::new(File::open(&path)?)
                .lines()
                .collect::<Result<_, _>>()?;
            let last = lines.len();
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<ProfileRecord>(line) {
                    Ok(rec) => {
                        merge(&mut map, rec);
                    }
                    Err(e) if i + 1 == last => {
                        warn!(path = %path.display(), error = %e, "skipping torn final profile line");
                    }
                    Err(e) => {
                        return Err(OrchestratorError::InvalidRecord(format!(
                            "{}:{}: {e}",
                            path.display(),
                            i + 1
                        )))
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        let cache = Self {
            map: RwLock::new(map),
            log: Some(Mutex::new(BufWriter::new(file))),
            path: Some(path),
        };
        // Rewrite as a clean snapshot so torn lines do not linger.
        cache.compact()?;
        Ok(cache)
    }

    /// Inserts a record; a record older than the cached one for the same
    /// key is ignored. Returns whether the cache changed.
    pub fn put_profile(&self, record: ProfileRecord) -> Result<bool, OrchestratorError> {
        record
            .validate()
            .map_err(OrchestratorError::InvalidRecord)?;
        let mut map = self.map.write();
        let line = serde_json::to_string(&record).map_err(io::Error::other)?;
        if !merge(&mut map, record) {
            return Ok(false);
        }
        if let Some(log) = &self.log {
            let mut log = log.lock();
            writeln!(log, "{line}")?;
            log.flush()?;
        }
        Ok(true)
    }

    /// Rewrites the backing file to exactly the current contents.
    pub fn compact(&self) -> Result<(), OrchestratorError> {
        let (Some(path), Some(log)) = (&self.path, &self.log) else {
            return Ok(());
        };
        let map = self.map.read();
        let mut log = log.lock();
        let tmp = path.with_extension("jsonl.tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            for r in map.values() {
                serde_json::to_writer(&mut w, r).map_err(io::Error::other)?;
                w.write_all(b"\n")?;
            }
            w.into_inner().map_err(|e| e.into_error())?.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        *log = BufWriter::new(OpenOptions::new().append(true).open(path)?);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.map.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.read().is_empty()
    }

    /// All records, ordered by key.
    pub fn records(&self) -> Vec<ProfileRecord> {
        self.map.read().values().cloned().collect()
    }

    /// Records for one model/device, ascending batch size.
    pub fn records_for(&self, model_id: &str, device_tag: &str) -> Vec<ProfileRecord> {
        self.map
            .read()
            .values()
            .filter(|r| r.model_id == model_id && r.device_tag == device_tag)
            .cloned()
            .collect()
    }

    pub fn plan_batch(
        &self,
        model_id: &str,
        policy: &SloPolicy,
        device_tag: &str,
    ) -> Result<BatchPlan, OrchestratorError> {
        policy.validate()?;
        let records = self.records_for(model_id, device_tag);
        choose_plan(&records, policy).ok_or_else(|| OrchestratorError::NoProfile {
            model_id: model_id.to_string(),
            device_tag: device_tag.to_string(),
        })
    }
}

fn merge(map: &mut BTreeMap<CacheKey, ProfileRecord>, rec: ProfileRecord) -> bool {
    let key = key_of(&rec);
    match map.get(&key) {
        Some(old) if old.measured_at > rec.measured_at => false,
        _ => {
            map.insert(key, rec);
            true
        }
    }
}

/// Picks the feasible batch size with the highest throughput (ties go to
/// the smaller batch). With nothing feasible it falls back to batch size 1,
/// or the smallest profiled size, flagged as missing the SLO.
pub fn choose_plan(records: &[ProfileRecord], policy: &SloPolicy) -> Option<BatchPlan> {
    let mut sorted: Vec<&ProfileRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.batch_size);
    let smallest = *sorted.first()?;

    let mut best: Option<&ProfileRecord> = None;
    for r in &sorted {
        if policy.percentile.latency_of(r) > policy.slo_ms {
            continue;
        }
        match best {
            Some(b) if r.throughput_ips <= b.throughput_ips => {}
            _ => best = Some(r),
        }
    }
    let (chosen, satisfied) = match best {
        Some(r) => (r, true),
        None => (smallest, false),
    };
    Some(BatchPlan {
        model_id: chosen.model_id.clone(),
        batch_size: chosen.batch_size,
        expected_latency_ms: policy.percentile.latency_of(chosen),
        expected_throughput_ips: chosen.throughput_ips,
        slo_satisfied: satisfied,
        slo_ms: policy.slo_ms,
        percentile: policy.percentile,
        derived_from: sorted
            .iter()
            .map(|r| Provenance {
                batch_size: r.batch_size,
                measured_at: r.measured_at,
            })
            .collect(),
    })
}

/// Switches the model's batch queue to the plan's batch size.
pub fn push_plan(router: &BatchRouter, plan: &BatchPlan) -> Result<(), OrchestratorError> {
    plan.validate()?;
    router
        .set_batch_size(&plan.model_id, plan.batch_size as usize)
        .map_err(|_| OrchestratorError::UnknownModelQueue(plan.model_id.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn rec(b: u32, p95: f32, ips: f32, at: u64) -> ProfileRecord {
        ProfileRecord {
            model_id: "m".into(),
            device_tag: "cpu-local".into(),
            batch_size: b,
            lat_mean_ms: p95 * 0.9,
            lat_p50_ms: p95 * 0.8,
            lat_p95_ms: p95,
            lat_p99_ms: p95 * 1.1,
            throughput_ips: ips,
            iterations: 30,
            measured_at: at,
        }
    }

    fn policy(slo: f32) -> SloPolicy {
        SloPolicy::new("m", slo, Percentile::P95)
    }

    #[test]
    fn picks_max_throughput_under_slo() {
        let cache = ProfileCache::in_memory();
        for r in [
            rec(1, 10.0, 100.0, 1),
            rec(8, 40.0, 200.0, 1),
            rec(32, 120.0, 260.0, 1),
        ] {
            cache.put_profile(r).unwrap();
        }
        let plan = cache.plan_batch("m", &policy(50.0), "cpu-local").unwrap();
        assert_eq!(plan.batch_size, 8);
        assert!(plan.slo_satisfied);
        assert_eq!(plan.expected_latency_ms, 40.0);
        assert_eq!(plan.derived_from.len(), 3);
    }

    #[test]
    fn single_candidate() {
        let plan = choose_plan(&[rec(4, 20.0, 200.0, 1)], &policy(50.0)).unwrap();
        assert_eq!(plan.batch_size, 4);
        assert!(plan.slo_satisfied);
    }

    #[test]
    fn falls_back_when_nothing_fits() {
        let plan = choose_plan(
            &[rec(1, 60.0, 10.0, 1), rec(4, 90.0, 30.0, 1)],
            &policy(50.0),
        )
        .unwrap();
        assert_eq!(plan.batch_size, 1);
        assert!(!plan.slo_satisfied);
        let plan = choose_plan(
            &[rec(4, 60.0, 10.0, 1), rec(2, 90.0, 30.0, 1)],
            &policy(50.0),
        )
        .unwrap();
        assert_eq!(plan.batch_size, 2);
    }

    #[test]
    fn ties_go_to_smaller_batch() {
        let plan = choose_plan(
            &[
                rec(2, 10.0, 300.0, 1),
                rec(4, 10.0, 300.0, 1),
                rec(1, 5.0, 100.0, 1),
            ],
            &policy(50.0),
        )
        .unwrap();
        assert_eq!(plan.batch_size, 2);
    }

    #[test]
    fn missing_profile_is_an_error() {
        let cache = ProfileCache::in_memory();
        assert!(matches!(
            cache.plan_batch("m", &policy(50.0), "cpu-local"),
            Err(OrchestratorError::NoProfile { .. })
        ));
    }

    #[test]
    fn newer_record_wins() {
        let cache = ProfileCache::in_memory();
        cache.put_profile(rec(1, 10.0, 100.0, 5)).unwrap();
        assert!(cache.put_profile(rec(1, 20.0, 50.0, 9)).unwrap());
        assert!(!cache.put_profile(rec(1, 30.0, 33.0, 7)).unwrap());
        let all = cache.records();
        assert_eq!(all.len(), 1);
        assert_eq!(all[0].measured_at, 9);
    }

    #[test]
    fn out_of_order_percentiles_are_invalid() {
        let mut r = rec(1, 10.0, 100.0, 1);
        r.lat_p50_ms = 11.0;
        assert!(matches!(
            ProfileCache::in_memory().put_profile(r),
            Err(OrchestratorError::InvalidRecord(_))
        ));
    }

    #[test]
    fn bad_policy_is_rejected() {
        let cache = ProfileCache::in_memory();
        cache.put_profile(rec(1, 10.0, 100.0, 1)).unwrap();
        for slo in [0.0, -1.0, f32::INFINITY, f32::NAN] {
            assert!(cache.plan_batch("m", &policy(slo), "cpu-local").is_err());
        }
    }

    #[test]
    fn torn_cache_line_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(PROFILE_CACHE_FILE);
        {
            let cache = ProfileCache::open(&path).unwrap();
            cache.put_profile(rec(1, 10.0, 100.0, 1)).unwrap();
        }
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"model_id\":\"m\",").unwrap();
        drop(f);
        let cache = ProfileCache::open(&path).unwrap();
        assert_eq!(cache.len(), 1);
        cache.put_profile(rec(2, 10.0, 150.0, 1)).unwrap();
        drop(cache);
        assert_eq!(ProfileCache::open(&path).unwrap().len(), 2);
    }
}
