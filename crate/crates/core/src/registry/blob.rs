//! Content-addressed blob store: `blobs/<first2hex>/<sha256hex>`.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::RegistryError;

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn is_hash(s: &str) -> bool {
    s.len() == 64
        && s.bytes()
            .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

#[derive(Debug, Clone)]
pub struct BlobStore {
    root: PathBuf,
}

impl BlobStore {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn path_for(&self, hash: &str) -> PathBuf {
        self.root.join(&hash[..2]).join(hash)
    }

    pub fn contains(&self, hash: &str) -> bool {
        is_hash(hash) && self.path_for(hash).is_file()
    }

    /// Stores `bytes` and returns their hash. Existing blobs are left alone,
    /// so identical payloads share one file.
    pub fn put(&self, bytes: &[u8]) -> Result<String, RegistryError> {
        let hash = content_hash(bytes);
        let path = self.path_for(&hash);
        if path.is_file() {
            return Ok(hash);
        }
        let dir = path.parent().expect("blob path has a parent");
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(".{hash}.{}.tmp", std::process::id()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(hash)
    }

    /// Reads a blob back, refusing to return bytes that no longer hash to
    /// their name.
    pub fn get(&self, hash: &str) -> Result<Vec<u8>, RegistryError> {
        if !is_hash(hash) {
            return Err(RegistryError::InvalidManifest(format!(
                "weight_ref {hash:?} is not 64 lowercase hex chars"
            )));
        }
        let path = self.path_for(hash);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(RegistryError::NotFound(format!("blob {hash}")))
            }
            Err(e) => return Err(e.into()),
        };
        if content_hash(&bytes) != hash {
            return Err(RegistryError::CorruptBlob {
                hash: hash.to_string(),
            });
        }
        Ok(bytes)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_dedup() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path()).unwrap();
        let a = store.put(b"abc").unwrap();
        let b = store.put(b"abc").unwrap();
        assert_eq!(a, b);
        assert_eq!(
            a,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(store.get(&a).unwrap(), b"abc");
        let files: Vec<_> = fs::read_dir(dir.path().join(&a[..2])).unwrap().collect();
        assert_eq!(files.len(), 1);
    }

    #[test]
    fn tampered_blob_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path()).unwrap();
        let h = store.put(b"abc").unwrap();
        fs::write(store.path_for(&h), b"abd").unwrap();
        assert!(matches!(
            store.get(&h),
            Err(RegistryError::CorruptBlob { .. })
        ));
    }

    #[test]
    fn missing_blob_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let store = BlobStore::open(dir.path()).unwrap();
        let h = content_hash(b"never stored");
        assert!(matches!(store.get(&h), Err(RegistryError::NotFound(_))));
        assert!(store.get("xyz").is_err());
    }
}
