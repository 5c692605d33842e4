use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::sync::Arc;

use parking_lot::RwLock;
use rayon::prelude::*;

use super::{l2_norm, FeatureVector, MatchError, MatchResult, Metric, Neighbor};

/// Heap entry ordered so that the worst candidate compares greatest.
#[derive(Debug, Clone, Copy)]
struct Candidate {
    badness: f32,
    score: f32,
    id: u64,
}

impl Candidate {
    fn new(metric: Metric, score: f32, id: u64) -> Self {
        let badness = match metric {
            Metric::Cosine => -score,
            Metric::L2 => score,
        };
        Self { badness, score, id }
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.badness
            .total_cmp(&other.badness)
            .then(self.id.cmp(&other.id))
    }
}

/// Bounded best-k collector.
struct TopK {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    fn offer(&mut self, c: Candidate) {
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(mut worst) = self.heap.peek_mut() {
            if c < *worst {
                *worst = c;
            }
        }
    }

    fn merge(mut self, other: TopK) -> TopK {
        for c in other.heap {
            self.offer(c);
        }
        self
    }

    fn into_sorted(self) -> Vec<Candidate> {
        self.heap.into_sorted_vec()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    dim: u32,
    metric: Metric,
    ids: Vec<u64>,
    values: Vec<f32>,
    id_set: HashSet<u64>,
}

impl FlatIndex {
    pub fn new(dim: u32, metric: Metric) -> Result<Self, MatchError> {
        if dim == 0 {
            return Err(MatchError::BadDimension);
        }
        Ok(Self {
            dim,
            metric,
            ids: Vec::new(),
            values: Vec::new(),
            id_set: HashSet::new(),
        })
    }

    /// Rebuilds an index from raw parts without renormalising. Used by the
    /// file loader so a round trip is bit-exact.
    pub(crate) fn from_raw(
        dim: u32,
        metric: Metric,
        ids: Vec<u64>,
        values: Vec<f32>,
    ) -> Result<Self, MatchError> {
        let mut idx = Self::new(dim, metric)?;
        for &id in &ids {
            if !idx.id_set.insert(id) {
                return Err(MatchError::DuplicateId(id));
            }
        }
        idx.ids = ids;
        idx.values = values;
        Ok(idx)
    }

    pub fn dim(&self) -> u32 {
        self.dim
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn contains(&self, id: u64) -> bool {
        self.id_set.contains(&id)
    }

    /// Stored values of the `i`-th item (normalised for cosine indexes).
    pub fn vector(&self, i: usize) -> &[f32] {
        let d = self.dim as usize;
        &self.values[i * d..(i + 1) * d]
    }

    pub fn get(&self, id: u64) -> Option<FeatureVector> {
        let pos = self.ids.iter().position(|&x| x == id)?;
        Some(FeatureVector::new(id, self.vector(pos).to_vec()))
    }

    fn prepare(&self, v: &FeatureVector) -> Result<Vec<f32>, MatchError> {
        if v.dim() != self.dim {
            return Err(MatchError::DimMismatch {
                expected: self.dim,
                got: v.dim(),
                id: v.id,
            });
        }
        if !v.is_finite() {
            return Err(MatchError::NonFinite(v.id));
        }
        match self.metric {
            Metric::L2 => Ok(v.values.clone()),
            Metric::Cosine => {
                let norm = l2_norm(&v.values);
                if norm == 0.0 || !norm.is_finite() {
                    return Err(MatchError::ZeroVector(v.id));
                }
                Ok(v.values.iter().map(|x| x / norm).collect())
            }
        }
    }

    /// Adds all vectors or none of them.
    pub fn add(&mut self, vectors: &[FeatureVector]) -> Result<usize, MatchError> {
        let mut staged = Vec::with_capacity(vectors.len() * self.dim as usize);
        let mut seen = HashSet::with_capacity(vectors.len());
        for v in vectors {
            if self.id_set.contains(&v.id) || !seen.insert(v.id) {
                return Err(MatchError::DuplicateId(v.id));
            }
            staged.extend(self.prepare(v)?);
        }
        self.values.extend(staged);
        for v in vectors {
            self.ids.push(v.id);
            self.id_set.insert(v.id);
        }
        Ok(vectors.len())
    }

    fn prepare_query(&self, query: &FeatureVector, k: usize) -> Result<Vec<f32>, MatchError> {
        if k == 0 {
            return Err(MatchError::BadK);
        }
        if self.is_empty() {
            return Err(MatchError::EmptyIndex);
        }
        self.prepare(query)
    }

    /// Scores items `[start, end)` into a local best-k.
    fn scan(&self, q: &[f32], start: usize, end: usize, k: usize) -> TopK {
        let d = self.dim as usize;
        let mut top = TopK::new(k);
        let metric = self.metric;
        let mut i = start;
        // Four rows at a time: independent accumulators, each summed in
        // ascending dimension order.
        while i + 4 <= end {
            let rows = &self.values[i * d..(i + 4) * d];
            let (r0, rest) = rows.split_at(d);
            let (r1, rest) = rest.split_at(d);
            let (r2, r3) = rest.split_at(d);
            let (mut s0, mut s1, mut s2, mut s3) = (0f32, 0f32, 0f32, 0f32);
            match metric {
                Metric::Cosine => {
                    for j in 0..d {
                        let qj = q[j];
                        s0 += qj * r0[j];
                        s1 += qj * r1[j];
                        s2 += qj * r2[j];
                        s3 += qj * r3[j];
                    }
                }
                Metric::L2 => {
                    for j in 0..d {
                        let qj = q[j];
                        let (e0, e1, e2, e3) = (qj - r0[j], qj - r1[j], qj - r2[j], qj - r3[j]);
                        s0 += e0 * e0;
                        s1 += e1 * e1;
                        s2 += e2 * e2;
                        s3 += e3 * e3;
                    }
                }
            }
            top.offer(Candidate::new(metric, s0, self.ids[i]));
            top.offer(Candidate::new(metric, s1, self.ids[i + 1]));
            top.offer(Candidate::new(metric, s2, self.ids[i + 2]));
            top.offer(Candidate::new(metric, s3, self.ids[i + 3]));
            i += 4;
        }
        while i < end {
            let row = self.vector(i);
            let s = score(metric, q, row);
            top.offer(Candidate::new(metric, s, self.ids[i]));
            i += 1;
        }
        top
    }

    fn finish(&self, query_id: u64, top: TopK) -> MatchResult {
        MatchResult {
            query_id,
            neighbors: top
                .into_sorted()
                .into_iter()
                .map(|c| Neighbor {
                    id: c.id,
                    score: c.score,
                })
                .collect(),
            metric: self.metric,
        }
    }

    /// Exact single-threaded top-k.
    pub fn search(&self, query: &FeatureVector, k: usize) -> Result<MatchResult, MatchError> {
        let q = self.prepare_query(query, k)?;
        let top = self.scan(&q, 0, self.len(), k);
        Ok(self.finish(query.id, top))
    }

    /// Exact top-k with the item range split into `shards` pieces scanned on
    /// the rayon pool. Results are identical to [`FlatIndex::search`].
    pub fn search_sharded(
        &self,
        query: &FeatureVector,
        k: usize,
        shards: usize,
    ) -> Result<MatchResult, MatchError> {
        let q = self.prepare_query(query, k)?;
        let n = self.len();
        let shards = shards.clamp(1, n);
        let chunk = n.div_ceil(shards);
        let top = (0..shards)
            .into_par_iter()
            .map(|s| {
                let start = s * chunk;
                let end = ((s + 1) * chunk).min(n);
                self.scan(&q, start.min(end), end, k)
            })
            .reduce(|| TopK::new(k), TopK::merge);
        Ok(self.finish(query.id, top))
    }
}

/// Score of one stored row against a prepared query.
pub(crate) fn score(metric: Metric, q: &[f32], row: &[f32]) -> f32 {
    let mut s = 0f32;
    match metric {
        Metric::Cosine => {
            for (a, b) in q.iter().zip(row) {
                s += a * b;
            }
        }
        Metric::L2 => {
            for (a, b) in q.iter().zip(row) {
                let e = a - b;
                s += e * e;
            }
        }
    }
    s
}

/// Snapshot-swapping wrapper: searches run against an immutable `Arc`
/// while adds build the next version.
#[derive(Debug, Clone)]
pub struct SharedIndex {
    inner: Arc<RwLock<Arc<FlatIndex>>>,
}

impl SharedIndex {
    pub fn new(index: FlatIndex) -> Self {
        Self {
            inner: Arc::new(RwLock::new(Arc::new(index))),
        }
    }

    pub fn snapshot(&self) -> Arc<FlatIndex> {
        self.inner.read().clone()
    }

    pub fn add(&self, vectors: &[FeatureVector]) -> Result<usize, MatchError> {
        let mut guard = self.inner.write();
        Arc::make_mut(&mut guard).add(vectors)
    }

    pub fn search(&self, query: &FeatureVector, k: usize) -> Result<MatchResult, MatchError> {
        self.snapshot().search(query, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(id: u64, v: &[f32]) -> FeatureVector {
        FeatureVector::new(id, v.to_vec())
    }

    #[test]
    fn build_rejects_zero_dim() {
        assert!(matches!(
            FlatIndex::new(0, Metric::L2),
            Err(MatchError::BadDimension)
        ));
        assert_eq!(FlatIndex::new(128, Metric::Cosine).unwrap().len(), 0);
    }

    #[test]
    fn add_counts_and_duplicates() {
        let mut idx = FlatIndex::new(2, Metric::L2).unwrap();
        assert_eq!(
            idx.add(&[fv(1, &[0., 1.]), fv(2, &[1., 0.]), fv(3, &[1., 1.])])
                .unwrap(),
            3
        );
        assert_eq!(idx.len(), 3);
        assert!(matches!(
            idx.add(&[fv(1, &[0., 0.])]),
            Err(MatchError::DuplicateId(1))
        ));
        // Duplicates inside one call leave the index untouched.
        assert!(idx.add(&[fv(9, &[0., 0.]), fv(9, &[0., 0.])]).is_err());
        assert_eq!(idx.len(), 3);
    }

    #[test]
    fn cosine_normalizes_on_insert() {
        let mut idx = FlatIndex::new(2, Metric::Cosine).unwrap();
        idx.add(&[fv(1, &[3., 4.])]).unwrap();
        assert_eq!(idx.vector(0), &[0.6, 0.8]);
        assert!(matches!(
            idx.add(&[fv(2, &[0., 0.])]),
            Err(MatchError::ZeroVector(2))
        ));
    }

    #[test]
    fn dim_mismatch_and_empty() {
        let mut idx = FlatIndex::new(3, Metric::Cosine).unwrap();
        assert!(matches!(
            idx.search(&fv(0, &[1., 0., 0.]), 1),
            Err(MatchError::EmptyIndex)
        ));
        assert!(matches!(
            idx.add(&[fv(1, &[1., 0.])]),
            Err(MatchError::DimMismatch {
                expected: 3,
                got: 2,
                ..
            })
        ));
        idx.add(&[fv(1, &[1., 0., 0.])]).unwrap();
        assert!(matches!(
            idx.search(&fv(0, &[1., 0., 0.]), 0),
            Err(MatchError::BadK)
        ));
    }

    #[test]
    fn self_match_ranks_first() {
        let mut idx = FlatIndex::new(3, Metric::Cosine).unwrap();
        idx.add(&[
            fv(1, &[1., 2., 3.]),
            fv(2, &[3., 2., 1.]),
            fv(3, &[0., 1., 0.]),
        ])
        .unwrap();
        let r = idx.search(&fv(99, &[3., 2., 1.]), 2).unwrap();
        assert_eq!(r.query_id, 99);
        assert_eq!(r.neighbors[0].id, 2);
        assert!((r.neighbors[0].score - 1.0).abs() < 1e-5);
        assert_eq!(r.neighbors.len(), 2);
    }

    #[test]
    fn ties_prefer_smaller_id() {
        let mut idx = FlatIndex::new(2, Metric::L2).unwrap();
        idx.add(&[fv(5, &[1., 0.]), fv(2, &[1., 0.]), fv(7, &[1., 0.])])
            .unwrap();
        let r = idx.search(&fv(0, &[0., 0.]), 3).unwrap();
        assert_eq!(r.ids(), vec![2, 5, 7]);
    }

    #[test]
    fn k_larger_than_index_returns_all() {
        let mut idx = FlatIndex::new(1, Metric::L2).unwrap();
        idx.add(&[fv(1, &[1.]), fv(2, &[3.])]).unwrap();
        let r = idx.search(&fv(0, &[2.9]), 10).unwrap();
        assert_eq!(r.ids(), vec![2, 1]);
    }

    #[test]
    fn shared_index_snapshots_are_stable() {
        let shared = SharedIndex::new(FlatIndex::new(1, Metric::L2).unwrap());
        shared.add(&[fv(1, &[1.])]).unwrap();
        let snap = shared.snapshot();
        shared.add(&[fv(2, &[2.])]).unwrap();
        assert_eq!(snap.len(), 1);
        assert_eq!(shared.snapshot().len(), 2);
    }
}
