//! Vector indexes over unit-norm embeddings. Similarity is the inner
//! product (cosine on the unit sphere), accumulated in `f64`.

use core::cmp::Ordering;

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::catalog::{EmbeddingMatrix, ImageId};
use crate::error::{Error, Result};

mod flat;
mod hnsw;

pub use flat::FlatIndex;
pub use hnsw::{HnswIndex, HnswParams, NeighborSelection};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub image_id: ImageId,
    pub score: f64,
}

/// Result ordering: score descending, then image id ascending.
pub fn rank_order(a: &SearchResult, b: &SearchResult) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.image_id.cmp(&b.image_id))
}

/// Heap entry where "greater" means "better match".
#[derive(Debug, Clone, Copy)]
pub(crate) struct Ranked {
    pub score: f64,
    pub key: u64,
}

impl PartialEq for Ranked {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Ranked {}
impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.key.cmp(&self.key))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    Flat,
    Hnsw,
}

/// What to build: the index kind plus its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum IndexSpec {
    Flat,
    Hnsw(HnswParams),
}

impl IndexSpec {
    pub fn kind(&self) -> IndexKind {
        match self {
            IndexSpec::Flat => IndexKind::Flat,
            IndexSpec::Hnsw(_) => IndexKind::Hnsw,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VectorIndex {
    Flat(FlatIndex),
    Hnsw(HnswIndex),
}

impl VectorIndex {
    pub fn build(spec: &IndexSpec, rows: &EmbeddingMatrix) -> Result<Self> {
        Ok(match spec {
            IndexSpec::Flat => VectorIndex::Flat(FlatIndex::build(rows)?),
            IndexSpec::Hnsw(p) => VectorIndex::Hnsw(HnswIndex::build(rows, *p)?),
        })
    }

    pub fn kind(&self) -> IndexKind {
        match self {
            VectorIndex::Flat(_) => IndexKind::Flat,
            VectorIndex::Hnsw(_) => IndexKind::Hnsw,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VectorIndex::Flat(i) => i.len(),
            VectorIndex::Hnsw(i) => i.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        match self {
            VectorIndex::Flat(i) => i.dim(),
            VectorIndex::Hnsw(i) => i.dim(),
        }
    }

    pub fn ids(&self) -> &[ImageId] {
        match self {
            VectorIndex::Flat(i) => i.ids(),
            VectorIndex::Hnsw(i) => i.ids(),
        }
    }

    /// Top-`k` search. `ef_search` applies to HNSW only and falls back to
    /// the index default (raised to `k` if smaller).
    pub fn search(&self, query: &[f32], k: usize, ef_search: Option<usize>) -> Result<Vec<SearchResult>> {
        match self {
            VectorIndex::Flat(i) => i.search(query, k),
            VectorIndex::Hnsw(i) => {
                let ef = ef_search.unwrap_or_else(|| i.params().ef_search.max(k));
                i.search(query, k, ef)
            }
        }
    }
}

pub(crate) fn check_query(dim: usize, query: &[f32], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Argument("k must be positive".into()));
    }
    if query.len() != dim {
        return Err(Error::Dimension {
            expected: dim,
            got: query.len(),
        });
    }
    Ok(())
}
