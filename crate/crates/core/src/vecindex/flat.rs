use alloc::collections::BinaryHeap;
use alloc::vec::Vec;
use core::cmp::Reverse;

use super::{check_query, rank_order, Ranked, SearchResult};
use crate::catalog::{EmbeddingMatrix, ImageId};
use crate::error::{Error, Result};
use crate::math;

/// Exhaustive exact-scan index.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    dim: usize,
    data: Vec<f32>,
    ids: Vec<ImageId>,
}

impl FlatIndex {
    pub fn build(rows: &EmbeddingMatrix) -> Result<Self> {
        Ok(FlatIndex {
            dim: rows.dim(),
            data: rows.as_slice().to_vec(),
            ids: rows.ids().to_vec(),
        })
    }

    pub fn from_parts(dim: usize, ids: Vec<ImageId>, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::EmptyInput("index dimension is zero"));
        }
        if data.len() != ids.len() * dim {
            return Err(Error::Dimension {
                expected: ids.len() * dim,
                got: data.len(),
            });
        }
        Ok(FlatIndex { dim, data, ids })
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

    pub fn ids(&self) -> &[ImageId] {
        &self.ids
    }

    pub fn vectors(&self) -> &[f32] {
        &self.data
    }

    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<SearchResult>> {
        check_query(self.dim, query, k)?;
        let k = k.min(self.ids.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        // min-heap of the k best seen so far; the top is the weakest kept
        let mut heap: BinaryHeap<Reverse<Ranked>> = BinaryHeap::with_capacity(k + 1);
        for (row, &id) in self.data.chunks_exact(self.dim).zip(&self.ids) {
            let cand = Ranked {
                score: math::dot(query, row),
                key: id,
            };
            if heap.len() < k {
                heap.push(Reverse(cand));
            } else if let Some(Reverse(worst)) = heap.peek() {
                if cand > *worst {
                    heap.pop();
                    heap.push(Reverse(cand));
                }
            }
        }
        let mut out: Vec<SearchResult> = heap
            .into_iter()
            .map(|Reverse(r)| SearchResult {
                image_id: r.key,
                score: r.score,
            })
            .collect();
        out.sort_by(rank_order);
        Ok(out)
    }
}
