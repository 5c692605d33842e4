//! Exact top-k similarity search over feature vectors.
//!
//! [`FlatIndex`] scans every stored vector per query. Cosine indexes store
//! L2-normalised vectors and score by dot product (higher is better); L2
//! indexes score by squared euclidean distance (lower is better). Ties are
//! always broken toward the smaller id, which keeps results identical
//! between the sequential and sharded scans.

mod format;
mod index;

pub use format::{
    read_feature_file, FeatureFileWriter, FEATURE_MAGIC, FORMAT_VERSION, INDEX_MAGIC,
};
pub use index::{FlatIndex, SharedIndex};

use std::fmt;
use std::io;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("index dimension must be >= 1")]
    BadDimension,
    #[error("dimension mismatch: index has {expected}, vector {id} has {got}")]
    DimMismatch { expected: u32, got: u32, id: u64 },
    #[error("id {0} already present")]
    DuplicateId(u64),
    #[error("vector {0} has zero norm")]
    ZeroVector(u64),
    #[error("vector {0} has non-finite values")]
    NonFinite(u64),
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be >= 1")]
    BadK,
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("truncated file: {0}")]
    TruncatedIndex(String),
    #[error("unsupported format version {0}")]
    VersionMismatch(u16),
    #[error("unknown metric code {0}")]
    UnknownMetric(u8),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    L2,
}

impl Metric {
    pub fn code(self) -> u8 {
        match self {
            Metric::Cosine => 0,
            Metric::L2 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, MatchError> {
        match code {
            0 => Ok(Metric::Cosine),
            1 => Ok(Metric::L2),
            other => Err(MatchError::UnknownMetric(other)),
        }
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "l2" => Ok(Metric::L2),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cosine => "cosine",
            Metric::L2 => "l2",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub id: u64,
    pub values: Vec<f32>,
}

impl FeatureVector {
    pub fn new(id: u64, values: Vec<f32>) -> Self {
        Self { id, values }
    }

    pub fn dim(&self) -> u32 {
        self.values.len() as u32
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn bit_eq(&self, other: &FeatureVector) -> bool {
        self.id == other.id
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub id: u64,
    pub score: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub query_id: u64,
    /// Best first.
    pub neighbors: Vec<Neighbor>,
    pub metric: Metric,
}

impl MatchResult {
    pub fn ids(&self) -> Vec<u64> {
        self.neighbors.iter().map(|n| n.id).collect()
    }
}

/// L2 norm with sequential accumulation.
pub fn l2_norm(values: &[f32]) -> f32 {
    let mut sq = 0f32;
    for &v in values {
        sq += v * v;
    }
    sq.sqrt()
}
