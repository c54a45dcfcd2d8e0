//! Retrieval-quality metrics, nearest-rank percentiles and relative
//! improvement arithmetic.
//!
//! A retrieved image is relevant when its product equals the query's
//! ground-truth product. All rank metrics look at the first
//! [`MAX_RANK`] results.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cascade::{QueryHint, RetrievalConfig, Retriever};
use crate::catalog::{Catalog, Domain, DomainFilter, EmbeddingMatrix, ImageId, ProductId, TlcId};
use crate::clock::Clock;
use crate::error::{Error, Result};
use crate::vecindex::SearchResult;

pub const MAX_RANK: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct QueryEntry {
    pub image_id: ImageId,
    pub vector: Vec<f32>,
    pub product_id: ProductId,
    pub tlc_id: TlcId,
}

impl QueryEntry {
    pub fn hint(&self) -> QueryHint {
        QueryHint {
            true_tlc: Some(self.tlc_id),
            key: self.image_id,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct QuerySet {
    pub entries: Vec<QueryEntry>,
}

impl QuerySet {
    /// All query-domain images of the catalog, in catalog order.
    pub fn from_catalog(catalog: &Catalog, embeddings: &EmbeddingMatrix) -> Result<Self> {
        let mut entries = Vec::new();
        for img in catalog.images().iter().filter(|i| i.domain == Domain::Query) {
            let v = embeddings.get(img.image_id).ok_or_else(|| Error::Mismatch {
                missing_embeddings: alloc::vec![img.image_id],
                missing_catalog: Vec::new(),
            })?;
            entries.push(QueryEntry {
                image_id: img.image_id,
                vector: v.to_vec(),
                product_id: img.product_id,
                tlc_id: img.tlc_id,
            });
        }
        Ok(QuerySet { entries })
    }

    pub fn filter(&self, mut keep: impl FnMut(&QueryEntry) -> bool) -> QuerySet {
        QuerySet {
            entries: self.entries.iter().filter(|e| keep(e)).cloned().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Gallery lookup: image → product, and gallery size per product.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Relevance {
    image_product: BTreeMap<ImageId, ProductId>,
    gallery_count: BTreeMap<ProductId, usize>,
}

impl Relevance {
    pub fn from_catalog(catalog: &Catalog) -> Self {
        let image_product = catalog
            .images()
            .iter()
            .filter(|i| i.domain == Domain::Catalog)
            .map(|i| (i.image_id, i.product_id))
            .collect();
        Relevance {
            image_product,
            gallery_count: catalog.product_counts(DomainFilter::Only(Domain::Catalog)),
        }
    }

    pub fn product_of(&self, image_id: ImageId) -> Option<ProductId> {
        self.image_product.get(&image_id).copied()
    }

    pub fn gallery_count(&self, product_id: ProductId) -> usize {
        self.gallery_count.get(&product_id).copied().unwrap_or(0)
    }
}

/// Rank statistics of one query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryScore {
    /// 1-based rank of the first relevant result within [`MAX_RANK`].
    pub first_hit: Option<usize>,
    pub ap_at_10: f64,
    /// Whether the true TLC was among the routed ones (cascade only).
    pub routed_correctly: Option<bool>,
}

/// Scores a ranked list against a ground-truth product.
pub fn score_query(
    results: &[SearchResult],
    truth: ProductId,
    relevance: &Relevance,
) -> Result<QueryScore> {
    let total_relevant = relevance.gallery_count(truth);
    if total_relevant == 0 {
        return Err(Error::GroundTruth(format!(
            "product {truth} has no gallery images"
        )));
    }
    let mut first_hit = None;
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for (i, r) in results.iter().take(MAX_RANK).enumerate() {
        if relevance.product_of(r.image_id) == Some(truth) {
            hits += 1;
            precision_sum += hits as f64 / (i + 1) as f64;
            first_hit.get_or_insert(i + 1);
        }
    }
    Ok(QueryScore {
        first_hit,
        ap_at_10: precision_sum / total_relevant.min(MAX_RANK) as f64,
        routed_correctly: None,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct QualityMetrics {
    pub queries: usize,
    pub recall_at_1: f64,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub map_at_10: f64,
    pub mrr: f64,
    pub routing_accuracy: Option<f64>,
}

impl QualityMetrics {
    /// The fixed metric basket averaged in comparisons.
    pub fn basket(&self) -> [(&'static str, f64); 5] {
        [
            ("recall@1", self.recall_at_1),
            ("recall@5", self.recall_at_5),
            ("recall@10", self.recall_at_10),
            ("mAP@10", self.map_at_10),
            ("MRR", self.mrr),
        ]
    }
}

/// Averages per-query scores in the order given.
pub fn aggregate(scores: &[QueryScore]) -> QualityMetrics {
    let n = scores.len();
    if n == 0 {
        return QualityMetrics::default();
    }
    let nf = n as f64;
    let recall = |k: usize| scores.iter().filter(|s| s.first_hit.is_some_and(|r| r <= k)).count() as f64 / nf;
    let mrr = scores
        .iter()
        .map(|s| s.first_hit.map_or(0.0, |r| 1.0 / r as f64))
        .sum::<f64>()
        / nf;
    let map = scores.iter().map(|s| s.ap_at_10).sum::<f64>() / nf;
    let routed: Vec<bool> = scores.iter().filter_map(|s| s.routed_correctly).collect();
    let routing_accuracy = if routed.len() == n {
        Some(routed.iter().filter(|&&b| b).count() as f64 / nf)
    } else {
        None
    };
    QualityMetrics {
        queries: n,
        recall_at_1: recall(1),
        recall_at_5: recall(5),
        recall_at_10: recall(10),
        map_at_10: map,
        mrr,
        routing_accuracy,
    }
}

/// Runs one query through `engine` and scores it. The engine is asked for
/// at least [`MAX_RANK`] results.
pub fn score_entry(
    engine: &dyn Retriever,
    entry: &QueryEntry,
    relevance: &Relevance,
    config: &RetrievalConfig,
    clock: &dyn Clock,
    routed: bool,
) -> Result<QueryScore> {
    let cfg = RetrievalConfig {
        k: config.k.max(MAX_RANK),
        ..*config
    };
    let out = engine.retrieve(&entry.vector, &entry.hint(), &cfg, clock)?;
    let mut s = score_query(&out.results, entry.product_id, relevance)?;
    if routed {
        s.routed_correctly = Some(out.trace.routed.iter().any(|(t, _)| *t == entry.tlc_id));
    }
    Ok(s)
}

/// Sequential quality evaluation. `routed` selects whether routing
/// accuracy is recorded (true for cascade engines).
pub fn evaluate(
    engine: &dyn Retriever,
    queries: &QuerySet,
    relevance: &Relevance,
    config: &RetrievalConfig,
    routed: bool,
) -> Result<QualityMetrics> {
    let clock = crate::clock::NullClock;
    let scores = queries
        .entries
        .iter()
        .map(|e| score_entry(engine, e, relevance, config, &clock, routed))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(&scores))
}

/// Nearest-rank percentile (`p` in (0, 100]) of an ascending sample.
pub fn percentile_nearest_rank(sorted: &[u64], p: f64) -> Option<u64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = libm::ceil(p / 100.0 * sorted.len() as f64) as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub p50: u64,
    pub p95: u64,
    pub p99: u64,
    pub mean: f64,
}

impl LatencySummary {
    pub fn from_samples(samples: &[u64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_unstable();
        let pct = |p| percentile_nearest_rank(&s, p).unwrap_or(0);
        LatencySummary {
            p50: pct(50.0),
            p95: pct(95.0),
            p99: pct(99.0),
            mean: s.iter().map(|&x| x as f64).sum::<f64>() / s.len() as f64,
        }
    }
}

/// `100·(new − base)/base`, or `None` when the base is zero.
pub fn relative_change_pct(base: f64, new: f64) -> Option<f64> {
    if base == 0.0 {
        None
    } else {
        Some(100.0 * (new - base) / base)
    }
}

/// SHA-256 over catalog records and embedding rows, hex encoded.
pub fn fingerprint(catalog: &Catalog, embeddings: &EmbeddingMatrix) -> String {
    let mut h = Sha256::new();
    for img in catalog.images() {
        h.update(img.image_id.to_le_bytes());
        h.update(img.product_id.to_le_bytes());
        h.update(img.tlc_id.to_le_bytes());
        h.update([img.domain as u8]);
    }
    h.update((embeddings.dim() as u64).to_le_bytes());
    for (id, v) in embeddings.rows() {
        h.update(id.to_le_bytes());
        for x in v {
            h.update(x.to_le_bytes());
        }
    }
    let mut s = String::with_capacity(64);
    for b in h.finalize() {
        s.push_str(&format!("{b:02x}"));
    }
    s
}
