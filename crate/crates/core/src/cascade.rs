//! Classify-then-search retrieval and the single-index baseline.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::catalog::{validate, Catalog, Domain, DomainFilter, EmbeddingMatrix, TlcId};
use crate::clock::Clock;
use crate::error::{Error, Result};
use crate::router::{OracleRouter, SoftmaxRouter};
use crate::vecindex::{rank_order, IndexKind, IndexSpec, SearchResult, VectorIndex};

#[derive(Debug, Clone, PartialEq)]
pub enum Router {
    Softmax(SoftmaxRouter),
    Oracle(OracleRouter),
}

impl Router {
    pub fn class_labels(&self) -> &[TlcId] {
        match self {
            Router::Softmax(r) => &r.class_labels,
            Router::Oracle(r) => &r.class_labels,
        }
    }

    /// Top `m` TLCs for a query. The oracle variant needs the true TLC in
    /// `hint` and draws from a stream keyed by `hint.key`.
    pub fn route(&self, query: &[f32], hint: &QueryHint, m: usize) -> Result<Vec<(TlcId, f64)>> {
        match self {
            Router::Softmax(r) => r.predict_top_m(query, m),
            Router::Oracle(o) => {
                let truth = hint.true_tlc.ok_or_else(|| {
                    Error::Argument("oracle routing needs the query's true TLC".into())
                })?;
                o.route(truth, hint.key, m)
            }
        }
    }
}

/// Per-query side information. Only the oracle router reads it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QueryHint {
    pub true_tlc: Option<TlcId>,
    pub key: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    pub k: usize,
    pub route_top_m: usize,
    pub ef_search: Option<usize>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            k: 10,
            route_top_m: 1,
            ef_search: None,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Argument("k must be positive".into()));
        }
        if self.route_top_m == 0 {
            return Err(Error::Argument("route_top_m must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimes {
    pub route_ns: u64,
    pub search_ns: u64,
    pub merge_ns: u64,
    pub total_ns: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    /// Routed TLCs with router probabilities; empty for the baseline.
    pub routed: Vec<(TlcId, f64)>,
    pub times: StageTimes,
    /// Set when every routed partition was empty or absent.
    pub no_partition: bool,
    pub build_version: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalOutcome {
    pub results: Vec<SearchResult>,
    pub trace: Trace,
}

/// Anything that answers a query: the cascade or the baseline.
pub trait Retriever {
    fn retrieve(
        &self,
        query: &[f32],
        hint: &QueryHint,
        config: &RetrievalConfig,
        clock: &dyn Clock,
    ) -> Result<RetrievalOutcome>;

    fn build_version(&self) -> u64;

    fn dim(&self) -> usize;
}

fn check_dim(dim: usize, query: &[f32]) -> Result<()> {
    if query.len() != dim {
        return Err(Error::Dimension {
            expected: dim,
            got: query.len(),
        });
    }
    Ok(())
}

/// Per-TLC partition indexes behind a router.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeEngine {
    router: Router,
    partitions: BTreeMap<TlcId, VectorIndex>,
    spec: IndexSpec,
    dim: usize,
    build_version: u64,
}

impl CascadeEngine {
    /// Builds one index per non-empty TLC partition of the catalog-domain
    /// images. Embeddings are expected to be unit-norm already.
    pub fn build(
        catalog: &Catalog,
        embeddings: &EmbeddingMatrix,
        router: Router,
        spec: IndexSpec,
        build_version: u64,
    ) -> Result<Self> {
        validate(catalog, embeddings)?;
        let labels = router.class_labels();
        let missing: Vec<TlcId> = catalog
            .tlc_ids()
            .iter()
            .copied()
            .filter(|t| labels.binary_search(t).is_err())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Coverage(missing));
        }
        if let Router::Softmax(r) = &router {
            if r.dim != embeddings.dim() {
                return Err(Error::Dimension {
                    expected: embeddings.dim(),
                    got: r.dim,
                });
            }
        }
        let mut partitions = BTreeMap::new();
        for (tlc, ids) in catalog.partition_by_tlc(DomainFilter::Only(Domain::Catalog)) {
            let rows = embeddings.subset(&ids)?;
            partitions.insert(tlc, VectorIndex::build(&spec, &rows)?);
        }
        Ok(CascadeEngine {
            router,
            partitions,
            spec,
            dim: embeddings.dim(),
            build_version,
        })
    }

    /// Assembles an engine from prebuilt parts (e.g. loaded from disk).
    pub fn from_parts(
        router: Router,
        partitions: BTreeMap<TlcId, VectorIndex>,
        spec: IndexSpec,
        dim: usize,
        build_version: u64,
    ) -> Result<Self> {
        for (tlc, idx) in &partitions {
            if idx.dim() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    got: idx.dim(),
                });
            }
            if router.class_labels().binary_search(tlc).is_err() {
                return Err(Error::Coverage(alloc::vec![*tlc]));
            }
        }
        Ok(CascadeEngine {
            router,
            partitions,
            spec,
            dim,
            build_version,
        })
    }

    pub fn router(&self) -> &Router {
        &self.router
    }

    pub fn partitions(&self) -> &BTreeMap<TlcId, VectorIndex> {
        &self.partitions
    }

    pub fn spec(&self) -> &IndexSpec {
        &self.spec
    }

    pub fn index_kind(&self) -> IndexKind {
        self.spec.kind()
    }

    pub fn num_classes(&self) -> usize {
        self.router.class_labels().len()
    }
}

impl Retriever for CascadeEngine {
    fn retrieve(
        &self,
        query: &[f32],
        hint: &QueryHint,
        config: &RetrievalConfig,
        clock: &dyn Clock,
    ) -> Result<RetrievalOutcome> {
        config.validate()?;
        check_dim(self.dim, query)?;
        let t0 = clock.now_ns();
        let routed = self.router.route(query, hint, config.route_top_m)?;
        let t1 = clock.now_ns();
        let mut lists: Vec<Vec<SearchResult>> = Vec::with_capacity(routed.len());
        for (tlc, _) in &routed {
            if let Some(idx) = self.partitions.get(tlc) {
                lists.push(idx.search(query, config.k, config.ef_search)?);
            }
        }
        let t2 = clock.now_ns();
        let no_partition = lists.is_empty();
        let results = if lists.len() <= 1 {
            lists.pop().unwrap_or_default()
        } else {
            let mut all: Vec<SearchResult> = lists.into_iter().flatten().collect();
            all.sort_by(rank_order);
            all.truncate(config.k);
            all
        };
        let t3 = clock.now_ns();
        Ok(RetrievalOutcome {
            results,
            trace: Trace {
                routed,
                times: StageTimes {
                    route_ns: t1.saturating_sub(t0),
                    search_ns: t2.saturating_sub(t1),
                    merge_ns: t3.saturating_sub(t2),
                    total_ns: t3.saturating_sub(t0),
                },
                no_partition,
                build_version: self.build_version,
            },
        })
    }

    fn build_version(&self) -> u64 {
        self.build_version
    }

    fn dim(&self) -> usize {
        self.dim
    }
}

/// One global index over every catalog-domain image.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineEngine {
    index: VectorIndex,
    spec: IndexSpec,
    build_version: u64,
}

impl BaselineEngine {
    pub fn build(
        catalog: &Catalog,
        embeddings: &EmbeddingMatrix,
        spec: IndexSpec,
        build_version: u64,
    ) -> Result<Self> {
        validate(catalog, embeddings)?;
        let ids: Vec<u64> = catalog
            .images()
            .iter()
            .filter(|i| i.domain == Domain::Catalog)
            .map(|i| i.image_id)
            .collect();
        let rows = embeddings.subset(&ids)?;
        Ok(BaselineEngine {
            index: VectorIndex::build(&spec, &rows)?,
            spec,
            build_version,
        })
    }

    pub fn from_parts(index: VectorIndex, spec: IndexSpec, build_version: u64) -> Self {
        BaselineEngine {
            index,
            spec,
            build_version,
        }
    }

    pub fn index(&self) -> &VectorIndex {
        &self.index
    }

    pub fn spec(&self) -> &IndexSpec {
        &self.spec
    }

    pub fn index_kind(&self) -> IndexKind {
        self.spec.kind()
    }
}

impl Retriever for BaselineEngine {
    fn retrieve(
        &self,
        query: &[f32],
        _hint: &QueryHint,
        config: &RetrievalConfig,
        clock: &dyn Clock,
    ) -> Result<RetrievalOutcome> {
        config.validate()?;
        check_dim(self.index.dim(), query)?;
        let t0 = clock.now_ns();
        let results = self.index.search(query, config.k, config.ef_search)?;
        let t1 = clock.now_ns();
        Ok(RetrievalOutcome {
            results,
            trace: Trace {
                routed: Vec::new(),
                times: StageTimes {
                    route_ns: 0,
                    search_ns: t1.saturating_sub(t0),
                    merge_ns: 0,
                    total_ns: t1.saturating_sub(t0),
                },
                no_partition: false,
                build_version: self.build_version,
            },
        })
    }

    fn build_version(&self) -> u64 {
        self.build_version
    }

    fn dim(&self) -> usize {
        self.index.dim()
    }
}
