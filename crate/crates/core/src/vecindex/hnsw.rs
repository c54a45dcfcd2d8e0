//! Hierarchical navigable small-world graph.
//!
//! Neighbor selection keeps the closest candidates (no diversity
//! heuristic). Layer 0 holds up to `2·m` neighbors per node, upper layers
//! up to `m`. Levels come from a seeded ChaCha8 stream, one `f64` per node
//! in insertion order, so a build is a pure function of rows and params.

use alloc::collections::BinaryHeap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Reverse;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_query, rank_order, Ranked, SearchResult};
use crate::catalog::{EmbeddingMatrix, ImageId};
use crate::error::{Error, Result};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HnswParams {
    /// Neighbor cap on layers above 0.
    pub m: usize,
    pub ef_construction: usize,
    /// Default beam width for queries.
    pub ef_search: usize,
    pub seed: u64,
    pub selection: NeighborSelection,
}

/// How a node's neighbor list is chosen from a candidate set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborSelection {
    /// Keep the closest candidates.
    Simple,
    /// Walk candidates closest first and keep one only if it is closer to
    /// the base node than to every neighbor kept so far. Preserves links
    /// between clusters that closest-only selection prunes away.
    #[default]
    Diverse,
}

impl Default for HnswParams {
    fn default() -> Self {
        HnswParams {
            m: 16,
            ef_construction: 200,
            ef_search: 100,
            seed: 0,
            selection: NeighborSelection::Diverse,
        }
    }
}

impl HnswParams {
    pub fn m0(&self) -> usize {
        2 * self.m
    }

    pub fn level_norm(&self) -> f64 {
        1.0 / math::ln(self.m as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Config(format!("hnsw m must be >= 2, got {}", self.m)));
        }
        if self.ef_construction < self.m {
            return Err(Error::Config(format!(
                "ef_construction ({}) must be >= m ({})",
                self.ef_construction, self.m
            )));
        }
        if self.ef_search == 0 {
            return Err(Error::Config("ef_search must be positive".into()));
        }
        Ok(())
    }

    fn cap(&self, layer: usize) -> usize {
        if layer == 0 {
            self.m0()
        } else {
            self.m
        }
    }
}

/// Bitset of visited nodes for one traversal.
struct Visited(Vec<u64>);

impl Visited {
    fn new(n: usize) -> Self {
        Visited(vec![0; n.div_ceil(64)])
    }

    /// Marks `i`; returns false if it was already marked.
    fn insert(&mut self, i: u32) -> bool {
        let (w, b) = ((i / 64) as usize, i % 64);
        let was = self.0[w] & (1 << b) != 0;
        self.0[w] |= 1 << b;
        !was
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HnswIndex {
    params: HnswParams,
    dim: usize,
    data: Vec<f32>,
    ids: Vec<ImageId>,
    levels: Vec<u8>,
    /// `links[node][layer]` for `layer <= levels[node]`.
    links: Vec<Vec<Vec<u32>>>,
    entry: Option<u32>,
}

impl HnswIndex {
    pub fn build(rows: &EmbeddingMatrix, params: HnswParams) -> Result<Self> {
        params.validate()?;
        let n = rows.len();
        if n > u32::MAX as usize {
            return Err(Error::Argument("too many rows for one hnsw index".into()));
        }
        let mut index = HnswIndex {
            params,
            dim: rows.dim(),
            data: rows.as_slice().to_vec(),
            ids: rows.ids().to_vec(),
            levels: Vec::with_capacity(n),
            links: Vec::with_capacity(n),
            entry: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let ml = params.level_norm();
        for node in 0..n {
            let level = draw_level(&mut rng, ml);
            index.insert(node as u32, level);
        }
        Ok(index)
    }

    /// Reassembles an index from serialized parts, checking structure.
    pub fn from_parts(
        params: HnswParams,
        dim: usize,
        ids: Vec<ImageId>,
        data: Vec<f32>,
        links: Vec<Vec<Vec<u32>>>,
        entry: Option<u32>,
    ) -> Result<Self> {
        params.validate()?;
        if dim == 0 {
            return Err(Error::EmptyInput("index dimension is zero"));
        }
        if data.len() != ids.len() * dim || links.len() != ids.len() {
            return Err(Error::Argument("inconsistent hnsw part lengths".into()));
        }
        let levels = links
            .iter()
            .map(|l| {
                if l.is_empty() || l.len() > u8::MAX as usize + 1 {
                    Err(Error::Argument("node with invalid layer count".into()))
                } else {
                    Ok((l.len() - 1) as u8)
                }
            })
            .collect::<Result<Vec<u8>>>()?;
        let index = HnswIndex {
            params,
            dim,
            data,
            ids,
            levels,
            links,
            entry,
        };
        index.check_structure().map_err(Error::Argument)?;
        Ok(index)
    }

    pub fn params(&self) -> &HnswParams {
        &self.params
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

    pub fn entry_point(&self) -> Option<u32> {
        self.entry
    }

    pub fn level(&self, node: u32) -> usize {
        self.levels[node as usize] as usize
    }

    pub fn max_level(&self) -> Option<usize> {
        self.entry.map(|e| self.level(e))
    }

    pub fn neighbors(&self, node: u32, layer: usize) -> &[u32] {
        &self.links[node as usize][layer]
    }

    pub fn links(&self) -> &[Vec<Vec<u32>>] {
        &self.links
    }

    /// Verifies degree caps, layer membership of both edge endpoints, edge
    /// targets in range, and that the entry point has the maximum level.
    pub fn check_structure(&self) -> core::result::Result<(), String> {
        let n = self.ids.len();
        match self.entry {
            None if n > 0 => return Err("non-empty index without entry point".into()),
            Some(_) if n == 0 => return Err("entry point on empty index".into()),
            Some(e) if e as usize >= n => return Err(format!("entry point {e} out of range")),
            _ => {}
        }
        let top = self.levels.iter().copied().max();
        if let (Some(e), Some(top)) = (self.entry, top) {
            if self.levels[e as usize] != top {
                return Err(format!("entry point {e} is not at the top level {top}"));
            }
        }
        for (node, layers) in self.links.iter().enumerate() {
            for (layer, adj) in layers.iter().enumerate() {
                if adj.len() > self.params.cap(layer) {
                    return Err(format!(
                        "node {node} has degree {} on layer {layer}",
                        adj.len()
                    ));
                }
                for &nb in adj {
                    if nb as usize >= n {
                        return Err(format!("node {node} links to missing node {nb}"));
                    }
                    if nb as usize == node {
                        return Err(format!("node {node} links to itself"));
                    }
                    if (self.levels[nb as usize] as usize) < layer {
                        return Err(format!(
                            "edge {node}->{nb} on layer {layer} above the target's level"
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn vector(&self, node: u32) -> &[f32] {
        let i = node as usize * self.dim;
        &self.data[i..i + self.dim]
    }

    fn score(&self, query: &[f32], node: u32) -> f64 {
        math::dot(query, self.vector(node))
    }

    fn insert(&mut self, node: u32, level: usize) {
        self.levels.push(level as u8);
        self.links.push(vec![Vec::new(); level + 1]);
        let Some(entry) = self.entry else {
            self.entry = Some(node);
            return;
        };
        let query = self.vector(node).to_vec();
        let top = self.level(entry);
        let mut ep = self.greedy_descend(&query, entry, top, level);
        let mut eps = vec![Ranked {
            score: self.score(&query, ep),
            key: ep as u64,
        }];
        for layer in (0..=level.min(top)).rev() {
            let found = self.search_layer(&query, &eps, self.params.ef_construction, layer);
            let cap = self.params.cap(layer);
            let chosen = self.select(&found, cap);
            for &nb in &chosen {
                self.links[nb as usize][layer].push(node);
                if self.links[nb as usize][layer].len() > cap {
                    self.prune(nb, layer, cap);
                }
            }
            self.links[node as usize][layer] = chosen;
            ep = found[0].key as u32;
            eps = found;
        }
        let _ = ep;
        if level > top {
            self.entry = Some(node);
        }
    }

    fn prune(&mut self, node: u32, layer: usize, cap: usize) {
        let base = self.vector(node).to_vec();
        let mut scored: Vec<Ranked> = self.links[node as usize][layer]
            .iter()
            .map(|&nb| Ranked {
                score: self.score(&base, nb),
                key: nb as u64,
            })
            .collect();
        scored.sort_by(|a, b| b.cmp(a));
        self.links[node as usize][layer] = self.select(&scored, cap);
    }

    /// Picks up to `cap` neighbors from candidates sorted best first,
    /// scored against the base node.
    fn select(&self, candidates: &[Ranked], cap: usize) -> Vec<u32> {
        match self.params.selection {
            NeighborSelection::Simple => candidates.iter().take(cap).map(|r| r.key as u32).collect(),
            NeighborSelection::Diverse => {
                let mut kept: Vec<u32> = Vec::with_capacity(cap);
                for c in candidates {
                    if kept.len() == cap {
                        break;
                    }
                    let v = self.vector(c.key as u32);
                    let dominated = kept.iter().any(|&s| math::dot(v, self.vector(s)) > c.score);
                    if !dominated {
                        kept.push(c.key as u32);
                    }
                }
                kept
            }
        }
    }

    /// Beam-1 greedy walk from `from_layer` down to `to_layer + 1`.
    fn greedy_descend(&self, query: &[f32], start: u32, from_layer: usize, to_layer: usize) -> u32 {
        let mut cur = start;
        let mut cur_score = self.score(query, cur);
        let mut layer = from_layer;
        while layer > to_layer {
            let mut improved = true;
            while improved {
                improved = false;
                for &nb in &self.links[cur as usize][layer] {
                    let s = self.score(query, nb);
                    let better = Ranked { score: s, key: nb as u64 }
                        > Ranked {
                            score: cur_score,
                            key: cur as u64,
                        };
                    if better {
                        cur = nb;
                        cur_score = s;
                        improved = true;
                    }
                }
            }
            layer -= 1;
        }
        cur
    }

    /// Best-first beam search on one layer. Returns up to `ef` nodes,
    /// best first.
    fn search_layer(&self, query: &[f32], entry: &[Ranked], ef: usize, layer: usize) -> Vec<Ranked> {
        let mut visited = Visited::new(self.ids.len());
        let mut candidates: BinaryHeap<Ranked> = BinaryHeap::new();
        let mut results: BinaryHeap<Reverse<Ranked>> = BinaryHeap::new();
        for &e in entry {
            if visited.insert(e.key as u32) {
                candidates.push(e);
                results.push(Reverse(e));
                if results.len() > ef {
                    results.pop();
                }
            }
        }
        while let Some(c) = candidates.pop() {
            if let Some(Reverse(worst)) = results.peek() {
                if results.len() >= ef && c < *worst {
                    break;
                }
            }
            for &nb in &self.links[c.key as usize][layer] {
                if !visited.insert(nb) {
                    continue;
                }
                let r = Ranked {
                    score: self.score(query, nb),
                    key: nb as u64,
                };
                let admit = results.len() < ef || results.peek().is_some_and(|Reverse(w)| r > *w);
                if admit {
                    candidates.push(r);
                    results.push(Reverse(r));
                    if results.len() > ef {
                        results.pop();
                    }
                }
            }
        }
        let mut out: Vec<Ranked> = results.into_iter().map(|Reverse(r)| r).collect();
        out.sort_by(|a, b| b.cmp(a));
        out
    }

    pub fn search(&self, query: &[f32], k: usize, ef_search: usize) -> Result<Vec<SearchResult>> {
        check_query(self.dim, query, k)?;
        if ef_search < k {
            return Err(Error::Argument(format!(
                "ef_search ({ef_search}) must be >= k ({k})"
            )));
        }
        let Some(entry) = self.entry else {
            return Ok(Vec::new());
        };
        let ep = self.greedy_descend(query, entry, self.level(entry), 0);
        let start = [Ranked {
            score: self.score(query, ep),
            key: ep as u64,
        }];
        let found = self.search_layer(query, &start, ef_search, 0);
        let mut out: Vec<SearchResult> = found
            .into_iter()
            .map(|r| SearchResult {
                image_id: self.ids[r.key as usize],
                score: r.score,
            })
            .collect();
        out.sort_by(rank_order);
        out.truncate(k);
        Ok(out)
    }
}

fn draw_level(rng: &mut ChaCha8Rng, ml: f64) -> usize {
    let mut u: f64 = rng.random();
    while u == 0.0 {
        u = rng.random();
    }
    let level = math::floor(-math::ln(u) * ml) as usize;
    level.min(u8::MAX as usize)
}
