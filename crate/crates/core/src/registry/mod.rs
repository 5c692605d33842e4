//! Two-layer model repository.
//!
//! Model metadata lives in an append-only `catalog.jsonl` (one JSON object
//! per line); weight files live in a content-addressed [`BlobStore`] and the
//! catalog only records their SHA-256. Deleting a version appends a tombstone
//! record, files are never removed.

mod blob;

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

pub use blob::{content_hash, is_hash, BlobStore};

use crate::clock::utc_now_ms;
use crate::tensor::TensorSpec;

pub const CATALOG_FILE: &str = "catalog.jsonl";
pub const BLOB_DIR: &str = "blobs";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("model {model_id} version {version} already registered")]
    DuplicateVersion { model_id: String, version: u32 },
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("blob {hash} does not match its content hash")]
    CorruptBlob { hash: String },
    #[error("catalog corrupt at line {line}: {reason}")]
    CorruptCatalog { line: usize, reason: String },
    #[error("storage failure: {0}")]
    StorageFailure(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Embedding,
    Detection,
    Classification,
    Synthetic,
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "embedding" => Ok(Task::Embedding),
            "detection" => Ok(Task::Detection),
            "classification" => Ok(Task::Classification),
            "synthetic" => Ok(Task::Synthetic),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Embedding => "embedding",
            Task::Detection => "detection",
            Task::Classification => "classification",
            Task::Synthetic => "synthetic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub model_id: String,
    pub name: String,
    pub task: Task,
    pub input_spec: TensorSpec,
    pub output_spec: TensorSpec,
    /// SHA-256 of the weight blob, empty for weight-less executors.
    pub weight_ref: String,
    pub version: u32,
    /// UTC milliseconds.
    pub registered_at: u64,
}

/// One line of `catalog.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogRecord {
    #[serde(flatten)]
    pub manifest: ModelManifest,
    pub tombstone: bool,
}

/// What a contributor submits: a manifest minus the fields the registry fills.
#[derive(Debug, Clone)]
pub struct ModelDraft {
    pub model_id: String,
    pub name: String,
    pub task: Task,
    pub input_spec: TensorSpec,
    pub output_spec: TensorSpec,
    /// Explicit version; `None` takes the next one.
    pub version: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VersionSel {
    Latest,
    Exact(u32),
}

impl FromStr for VersionSel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "latest" {
            return Ok(VersionSel::Latest);
        }
        s.parse()
            .map(VersionSel::Exact)
            .map_err(|e| format!("bad version {s:?}: {e}"))
    }
}

pub fn valid_model_id(id: &str) -> bool {
    (1..=64).contains(&id.len())
        && id
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
}

pub struct Registry {
    root: PathBuf,
    blobs: BlobStore,
    writer: Mutex<File>,
    snapshot: RwLock<Arc<Vec<CatalogRecord>>>,
}

impl fmt::Debug for Registry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("root", &self.root)
            .finish()
    }
}

impl Registry {
    /// Opens (or creates) a repository rooted at `root`.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, RegistryError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root)?;
        let blobs = BlobStore::open(root.join(BLOB_DIR))?;
        let catalog_path = root.join(CATALOG_FILE);
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&catalog_path)?;
        let (records, good_len) = load_catalog(&mut file, &catalog_path)?;
        if good_len < file.metadata()?.len() {
            // Drop the torn tail so later appends start on a clean line.
            file.set_len(good_len)?;
        }
        file.seek(SeekFrom::End(0))?;
        Ok(Self {
            root,
            blobs,
            writer: Mutex::new(file),
            snapshot: RwLock::new(Arc::new(records)),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn blobs(&self) -> &BlobStore {
        &self.blobs
    }

    /// Every catalog record in append order, tombstones included.
    pub fn records(&self) -> Arc<Vec<CatalogRecord>> {
        self.snapshot.read().clone()
    }

    pub fn register_model(
        &self,
        draft: ModelDraft,
        weights: Option<&[u8]>,
    ) -> Result<ModelManifest, RegistryError> {
        if !valid_model_id(&draft.model_id) {
            return Err(RegistryError::InvalidManifest(format!(
                "model_id {:?} must match [a-z0-9_-]{{1,64}}",
                draft.model_id
            )));
        }
        draft
            .input_spec
            .validate()
            .map_err(|e| RegistryError::InvalidManifest(format!("input_spec: {e}")))?;
        draft
            .output_spec
            .validate()
            .map_err(|e| RegistryError::InvalidManifest(format!("output_spec: {e}")))?;

        let mut writer = self.writer.lock();
        let current = self.records();
        let existing = current
            .iter()
            .filter(|r| r.manifest.model_id == draft.model_id && !r.tombstone)
            .map(|r| r.manifest.version)
            .max()
            .unwrap_or(0);
        let next = existing + 1;
        let version = match draft.version {
            None => next,
            Some(v) if v >= 1 && v <= existing => {
                return Err(RegistryError::DuplicateVersion {
                    model_id: draft.model_id,
                    version: v,
                })
            }
            Some(v) if v == next => v,
            Some(v) => {
                return Err(RegistryError::InvalidManifest(format!(
                    "version {v} would leave a gap, next version is {next}"
                )))
            }
        };

        let weight_ref = match weights {
            Some(bytes) => self.blobs.put(bytes)?,
            None => String::new(),
        };
        let manifest = ModelManifest {
            model_id: draft.model_id,
            name: draft.name,
            task: draft.task,
            input_spec: draft.input_spec,
            output_spec: draft.output_spec,
            weight_ref,
            version,
            registered_at: utc_now_ms(),
        };
        self.append(
            &mut writer,
            CatalogRecord {
                manifest: manifest.clone(),
                tombstone: false,
            },
        )?;
        Ok(manifest)
    }

    /// Marks a version deleted by appending a tombstone record.
    pub fn tombstone(&self, model_id: &str, version: u32) -> Result<(), RegistryError> {
        let mut writer = self.writer.lock();
        let manifest = self.get_model(model_id, VersionSel::Exact(version))?;
        self.append(
            &mut writer,
            CatalogRecord {
                manifest,
                tombstone: true,
            },
        )
    }

    fn append(&self, writer: &mut File, record: CatalogRecord) -> Result<(), RegistryError> {
        let mut line = serde_json::to_string(&record).map_err(io::Error::other)?;
        line.push('\n');
        writer.write_all(line.as_bytes())?;
        writer.sync_data()?;
        let mut snapshot = self.snapshot.write();
        let mut next = Vec::with_capacity(snapshot.len() + 1);
        next.extend(snapshot.iter().cloned());
        next.push(record);
        *snapshot = Arc::new(next);
        Ok(())
    }

    pub fn get_model(
        &self,
        model_id: &str,
        sel: VersionSel,
    ) -> Result<ModelManifest, RegistryError> {
        let records = self.records();
        let dead = |v: u32| {
            records
                .iter()
                .any(|r| r.tombstone && r.manifest.model_id == model_id && r.manifest.version == v)
        };
        let live = records
            .iter()
            .filter(|r| !r.tombstone && r.manifest.model_id == model_id)
            .filter(|r| !dead(r.manifest.version));
        let found = match sel {
            VersionSel::Latest => live.max_by_key(|r| r.manifest.version),
            VersionSel::Exact(v) => live.into_iter().find(|r| r.manifest.version == v),
        };
        found
            .map(|r| r.manifest.clone())
            .ok_or_else(|| RegistryError::NotFound(format!("model {model_id} ({sel:?})")))
    }

    /// Latest live version of every model, sorted by id.
    pub fn list(&self) -> Vec<ModelManifest> {
        let mut ids: Vec<String> = self
            .records()
            .iter()
            .map(|r| r.manifest.model_id.clone())
            .collect();
        ids.sort();
        ids.dedup();
        ids.iter()
            .filter_map(|id| self.get_model(id, VersionSel::Latest).ok())
            .collect()
    }

    pub fn fetch_weights(&self, weight_ref: &str) -> Result<Vec<u8>, RegistryError> {
        self.blobs.get(weight_ref)
    }
}

/// Parses the catalog, returning the records plus the byte length of the
/// well-formed prefix. Only the final line may be torn.
fn load_catalog(file: &mut File, path: &Path) -> Result<(Vec<CatalogRecord>, u64), RegistryError> {
    file.seek(SeekFrom::Start(0))?;
    let mut reader = BufReader::new(&*file);
    let mut records = Vec::new();
    let mut good_len = 0u64;
    let mut buf = Vec::new();
    let mut line_no = 0usize;
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let complete = buf.last() == Some(&b'\n');
        let text = std::str::from_utf8(&buf).map(str::trim_end);
        let parsed = text
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str::<CatalogRecord>(t).map_err(|e| e.to_string()));
        match parsed {
            Ok(rec) if complete => {
                records.push(rec);
                good_len += n as u64;
            }
            outcome => {
                let mut rest = Vec::new();
                io::Read::read_to_end(&mut reader, &mut rest)?;
                if !rest.is_empty() {
                    let reason = match outcome {
                        Err(e) => e,
                        Ok(_) => "unterminated line".into(),
                    };
                    return Err(RegistryError::CorruptCatalog {
                        line: line_no,
                        reason,
                    });
                }
                warn!(
                    path = %path.display(),
                    line = line_no,
                    "skipping torn final catalog line"
                );
                break;
            }
        }
    }
    Ok((records, good_len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{DType, Dim};

    fn draft(id: &str) -> ModelDraft {
        ModelDraft {
            model_id: id.into(),
            name: "product embedder".into(),
            task: Task::Embedding,
            input_spec: TensorSpec::new(
                DType::F32,
                vec![Dim::Batch, Dim::Fixed(64), Dim::Fixed(64), Dim::Fixed(3)],
            ),
            output_spec: TensorSpec::new(DType::F32, vec![Dim::Batch, Dim::Fixed(128)]),
            version: None,
        }
    }

    #[test]
    fn first_registration_is_version_one() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        let weights = vec![7u8; 1024];
        let m = reg
            .register_model(draft("prod-emb"), Some(&weights))
            .unwrap();
        assert_eq!(m.version, 1);
        assert_eq!(m.weight_ref, content_hash(&weights));
        assert_eq!(reg.get_model("prod-emb", VersionSel::Latest).unwrap(), m);
    }

    #[test]
    fn bad_id_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        let err = reg.register_model(draft("Bad Name!"), None).unwrap_err();
        assert!(matches!(err, RegistryError::InvalidManifest(_)));
    }

    #[test]
    fn explicit_versions_are_checked() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        reg.register_model(draft("m"), None).unwrap();
        let mut d = draft("m");
        d.version = Some(1);
        assert!(matches!(
            reg.register_model(d, None),
            Err(RegistryError::DuplicateVersion { version: 1, .. })
        ));
        let mut d = draft("m");
        d.version = Some(5);
        assert!(matches!(
            reg.register_model(d, None),
            Err(RegistryError::InvalidManifest(_))
        ));
        let mut d = draft("m");
        d.version = Some(2);
        assert_eq!(reg.register_model(d, None).unwrap().version, 2);
    }

    #[test]
    fn missing_model_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        assert!(matches!(
            reg.get_model("missing", VersionSel::Latest),
            Err(RegistryError::NotFound(_))
        ));
    }

    #[test]
    fn tombstone_hides_version_but_keeps_records() {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(dir.path()).unwrap();
        reg.register_model(draft("m"), None).unwrap();
        reg.register_model(draft("m"), None).unwrap();
        reg.tombstone("m", 2).unwrap();
        assert_eq!(reg.get_model("m", VersionSel::Latest).unwrap().version, 1);
        assert!(reg.get_model("m", VersionSel::Exact(2)).is_err());
        drop(reg);
        let reg = Registry::open(dir.path()).unwrap();
        assert_eq!(reg.records().len(), 3);
        assert!(reg.records()[2].tombstone);
    }

    #[test]
    fn torn_final_line_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        {
            let reg = Registry::open(dir.path()).unwrap();
            reg.register_model(draft("a"), None).unwrap();
            reg.register_model(draft("b"), None).unwrap();
        }
        let path = dir.path().join(CATALOG_FILE);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"model_id":"c","na"#).unwrap();
        drop(f);
        let reg = Registry::open(dir.path()).unwrap();
        assert_eq!(reg.records().len(), 2);
        reg.register_model(draft("c"), None).unwrap();
        drop(reg);
        let reg = Registry::open(dir.path()).unwrap();
        assert_eq!(reg.records().len(), 3);
        assert_eq!(reg.records()[2].manifest.model_id, "c");
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        {
            let reg = Registry::open(dir.path()).unwrap();
            reg.register_model(draft("a"), None).unwrap();
        }
        let path = dir.path().join(CATALOG_FILE);
        let good = fs::read_to_string(&path).unwrap();
        fs::write(&path, format!("garbage\n{good}")).unwrap();
        assert!(matches!(
            Registry::open(dir.path()),
            Err(RegistryError::CorruptCatalog { line: 1, .. })
        ));
    }
}
