//! Labeled vector pool with exact and HNSW-approximate Euclidean KNN.
//!
//! Records are append-only and split into one partition per label, so opposite-label
//! search is a direct query over one partition. Distances are compared squared and
//! reported as true Euclidean distances. Results are ordered by ascending distance,
//! then ascending id.

mod hnsw;
mod io;

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::path::PathBuf;

use thiserror::Error;

use crate::autodiff::squared_distance;

pub use hnsw::{HnswIndex, HnswParams};
pub use io::{POOL_MAGIC, POOL_VERSION};

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("record id {0} already present")]
    DuplicateId(u64),
    #[error("vector has {got} entries, pool dimension is {expected}")]
    Dim { expected: usize, got: usize },
    #[error("label must be 0 or 1, got {0}")]
    Label(u8),
    #[error("K must be at least 1")]
    ZeroK,
    #[error("pool is frozen; records cannot be added")]
    Frozen,
    #[error("no approximate index built for label partition {0}")]
    IndexNotBuilt(u8),
    #[error("pool file format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct VectorRecord {
    pub id: u64,
    pub label: u8,
    pub vector: Vec<f32>,
}

/// Which records a query may return.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelFilter {
    Any,
    LabelEquals(u8),
    LabelNot(u8),
}

impl LabelFilter {
    fn partitions(self) -> &'static [usize] {
        match self {
            LabelFilter::Any => &[0, 1],
            LabelFilter::LabelEquals(0) | LabelFilter::LabelNot(1) => &[0],
            LabelFilter::LabelEquals(1) | LabelFilter::LabelNot(0) => &[1],
            _ => &[],
        }
    }

    pub fn accepts(self, label: u8) -> bool {
        match self {
            LabelFilter::Any => true,
            LabelFilter::LabelEquals(l) => label == l,
            LabelFilter::LabelNot(l) => label != l,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub id: u64,
    pub distance: f32,
}

/// `(squared distance, id)` with the result ordering used everywhere in this module.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Scored {
    pub dist: f32,
    pub id: u64,
    pub row: u32,
}

impl Eq for Scored {}

impl Ord for Scored {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Scored {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Keeps the `k` smallest items seen.
pub(crate) struct TopK {
    k: usize,
    heap: BinaryHeap<Scored>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    pub fn push(&mut self, s: Scored) {
        if self.heap.len() < self.k {
            self.heap.push(s);
        } else if let Some(top) = self.heap.peek() {
            if s < *top {
                self.heap.pop();
                self.heap.push(s);
            }
        }
    }

    pub fn into_sorted(self) -> Vec<Scored> {
        self.heap.into_sorted_vec()
    }
}

fn to_neighbors(sorted: Vec<Scored>) -> Vec<Neighbor> {
    sorted
        .into_iter()
        .map(|s| Neighbor {
            id: s.id,
            distance: s.dist.sqrt(),
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct VectorPool {
    dim: usize,
    ids: Vec<u64>,
    labels: Vec<u8>,
    data: Vec<f32>,
    index_of: HashMap<u64, u32>,
    partitions: [Vec<u32>; 2],
    graphs: [Option<HnswIndex>; 2],
    frozen: bool,
}

impl VectorPool {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            labels: Vec::new(),
            data: Vec::new(),
            index_of: HashMap::new(),
            partitions: [Vec::new(), Vec::new()],
            graphs: [None, None],
            frozen: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Makes the pool read-only. Queries are unaffected.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn add(&mut self, record: VectorRecord) -> Result<(), PoolError> {
        if self.frozen {
            return Err(PoolError::Frozen);
        }
        if record.vector.len() != self.dim {
            return Err(PoolError::Dim {
                expected: self.dim,
                got: record.vector.len(),
            });
        }
        if record.label > 1 {
            return Err(PoolError::Label(record.label));
        }
        if self.index_of.contains_key(&record.id) {
            return Err(PoolError::DuplicateId(record.id));
        }
        let row = self.ids.len() as u32;
        self.index_of.insert(record.id, row);
        self.ids.push(record.id);
        self.labels.push(record.label);
        self.data.extend_from_slice(&record.vector);
        self.partitions[record.label as usize].push(row);
        // A built index no longer covers every record.
        self.graphs[record.label as usize] = None;
        Ok(())
    }

    pub fn contains(&self, id: u64) -> bool {
        self.index_of.contains_key(&id)
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn label_count(&self, label: u8) -> usize {
        self.partitions.get(label as usize).map_or(0, Vec::len)
    }

    pub fn get(&self, id: u64) -> Option<(u8, &[f32])> {
        self.index_of.get(&id).map(|&r| (self.labels[r as usize], self.row(r)))
    }

    pub fn records(&self) -> impl Iterator<Item = (u64, u8, &[f32])> + '_ {
        (0..self.ids.len()).map(move |r| (self.ids[r], self.labels[r], self.row(r as u32)))
    }

    #[inline]
    pub(crate) fn row(&self, r: u32) -> &[f32] {
        let r = r as usize;
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    #[inline]
    pub(crate) fn id_of(&self, r: u32) -> u64 {
        self.ids[r as usize]
    }

    fn check_query(&self, query: &[f32], k: usize) -> Result<(), PoolError> {
        if query.len() != self.dim {
            return Err(PoolError::Dim {
                expected: self.dim,
                got: query.len(),
            });
        }
        if k == 0 {
            return Err(PoolError::ZeroK);
        }
        Ok(())
    }

    /// Exact KNN by linear scan of the partitions selected by `filter`.
    pub fn knn(&self, query: &[f32], k: usize, filter: LabelFilter, exclude: Option<u64>) -> Result<Vec<Neighbor>, PoolError> {
        self.check_query(query, k)?;
        let mut top = TopK::new(k);
        for &p in filter.partitions() {
            for &row in &self.partitions[p] {
                let id = self.id_of(row);
                if Some(id) == exclude {
                    continue;
                }
                top.push(Scored {
                    dist: squared_distance(query, self.row(row)),
                    id,
                    row,
                });
            }
        }
        Ok(to_neighbors(top.into_sorted()))
    }

    /// Exact KNN for many queries at once. The pool is scanned in blocks small enough to
    /// stay in cache while every query visits the block, so the scan streams the pool
    /// once per batch instead of once per query. Results equal [`Self::knn`] per query.
    pub fn knn_batch(&self, queries: &[Vec<f32>], k: usize, filter: LabelFilter) -> Result<Vec<Vec<Neighbor>>, PoolError> {
        for q in queries {
            self.check_query(q, k)?;
        }
        const BLOCK: usize = 256;
        let mut tops: Vec<TopK> = queries.iter().map(|_| TopK::new(k)).collect();
        for &p in filter.partitions() {
            for block in self.partitions[p].chunks(BLOCK) {
                for (q, top) in queries.iter().zip(tops.iter_mut()) {
                    for &row in block {
                        top.push(Scored {
                            dist: squared_distance(q, self.row(row)),
                            id: self.id_of(row),
                            row,
                        });
                    }
                }
            }
        }
        Ok(tops.into_iter().map(|t| to_neighbors(t.into_sorted())).collect())
    }

    /// Builds one HNSW graph per label partition.
    pub fn build_index(&mut self, params: HnswParams) {
        for label in 0..2u8 {
            let rows = self.partitions[label as usize].clone();
            let p = HnswParams {
                seed: params.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(label as u64 + 1)),
                ..params
            };
            let graph = HnswIndex::build(self, rows, p);
            self.graphs[label as usize] = Some(graph);
        }
    }

    pub fn has_index(&self) -> bool {
        self.graphs.iter().all(Option::is_some)
    }

    /// Approximate KNN through the per-label HNSW graphs.
    pub fn knn_approx(
        &self,
        query: &[f32],
        k: usize,
        filter: LabelFilter,
        ef_search: usize,
        exclude: Option<u64>,
    ) -> Result<Vec<Neighbor>, PoolError> {
        self.check_query(query, k)?;
        let want = k + usize::from(exclude.is_some());
        let mut top = TopK::new(k);
        for &p in filter.partitions() {
            let graph = self.graphs[p].as_ref().ok_or(PoolError::IndexNotBuilt(p as u8))?;
            for s in graph.search(self, query, want, ef_search.max(want)) {
                if Some(s.id) != exclude {
                    top.push(s);
                }
            }
        }
        Ok(to_neighbors(top.into_sorted()))
    }
}
