//! Quality evaluation fan-out, single-threaded latency measurement and
//! the throughput mode.

use std::time::Instant;

use cbir_core::cascade::{RetrievalConfig, Retriever};
use cbir_core::clock::{Clock, NullClock};
use cbir_core::metrics::{aggregate, score_entry, QualityMetrics, QueryScore, QuerySet, Relevance};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type SharedRetriever = dyn Retriever + Sync;

/// Per-query scores computed across the rayon pool, in query order.
pub fn score_parallel(
    engine: &SharedRetriever,
    queries: &QuerySet,
    relevance: &Relevance,
    config: &RetrievalConfig,
    routed: bool,
) -> Result<Vec<QueryScore>> {
    Ok(queries
        .entries
        .par_iter()
        .map(|e| score_entry(engine, e, relevance, config, &NullClock, routed))
        .collect::<cbir_core::Result<Vec<_>>>()?)
}

/// Quality metrics with queries scored in parallel. Aggregation follows
/// query order, so the result matches the sequential evaluator exactly.
pub fn evaluate_parallel(
    engine: &SharedRetriever,
    queries: &QuerySet,
    relevance: &Relevance,
    config: &RetrievalConfig,
    routed: bool,
) -> Result<QualityMetrics> {
    Ok(aggregate(&score_parallel(engine, queries, relevance, config, routed)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyConfig {
    pub warmup: usize,
    pub measured: usize,
    /// Passes over the measured queries; samples = measured × repetitions.
    pub repetitions: usize,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig {
            warmup: 50,
            measured: 500,
            repetitions: 1,
        }
    }
}

impl LatencyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup < 1 {
            return Err(Error::Usage("latency warmup must be >= 1".into()));
        }
        if self.measured < 100 {
            return Err(Error::Usage("latency measured count must be >= 100".into()));
        }
        if self.repetitions < 1 {
            return Err(Error::Usage("latency repetitions must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySample {
    pub query_index: usize,
    pub route_ns: u64,
    pub search_ns: u64,
    pub merge_ns: u64,
    pub total_ns: u64,
}

/// Times queries one at a time on `clock`. Query `i` of the measured run
/// is `queries[i % len]`; warmup queries precede them and are discarded.
/// The total is taken around the whole `retrieve` call, the stages come
/// from the engine's own trace on the same clock.
pub fn measure_latency(
    engine: &dyn Retriever,
    queries: &QuerySet,
    retrieval: &RetrievalConfig,
    config: &LatencyConfig,
    clock: &dyn Clock,
) -> Result<Vec<LatencySample>> {
    config.validate()?;
    if queries.is_empty() {
        return Err(Error::Usage("latency measurement needs at least one query".into()));
    }
    let n = queries.len();
    let run = |i: usize| -> Result<LatencySample> {
        let q = &queries.entries[i % n];
        let start = clock.now_ns();
        let out = engine.retrieve(&q.vector, &q.hint(), retrieval, clock)?;
        let end = clock.now_ns();
        if end < start {
            return Err(Error::Measurement(format!(
                "clock went backwards: {start} ns then {end} ns"
            )));
        }
        let t = out.trace.times;
        let total = end - start;
        let stages = t.route_ns + t.search_ns + t.merge_ns;
        if stages > total || t.total_ns > total {
            return Err(Error::Measurement(format!(
                "stage times ({stages} ns) exceed the enclosing total ({total} ns)"
            )));
        }
        Ok(LatencySample {
            query_index: i % n,
            route_ns: t.route_ns,
            search_ns: t.search_ns,
            merge_ns: t.merge_ns,
            total_ns: total,
        })
    };
    for i in 0..config.warmup {
        run(i)?;
    }
    let mut samples = Vec::with_capacity(config.measured * config.repetitions);
    for _ in 0..config.repetitions {
        for i in 0..config.measured {
            samples.push(run(i)?);
        }
    }
    Ok(samples)
}

/// Aggregate queries per second with `workers` threads each answering a
/// strided share of the query set `passes` times.
pub fn measure_throughput(
    engine: &SharedRetriever,
    queries: &QuerySet,
    retrieval: &RetrievalConfig,
    workers: usize,
    passes: usize,
) -> Result<f64> {
    if workers == 0 || passes == 0 || queries.is_empty() {
        return Err(Error::Usage("throughput needs workers, passes and queries".into()));
    }
    let start = Instant::now();
    let results: Vec<Result<usize>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                s.spawn(move || -> Result<usize> {
                    let mut done = 0;
                    for _ in 0..passes {
                        for q in queries.entries.iter().skip(w).step_by(workers) {
                            engine.retrieve(&q.vector, &q.hint(), retrieval, &NullClock)?;
                            done += 1;
                        }
                    }
                    Ok(done)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("throughput worker panicked")).collect()
    });
    let mut total = 0;
    for r in results {
        total += r?;
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(if secs > 0.0 { total as f64 / secs } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use cbir_core::cascade::BaselineEngine;
    use cbir_core::catalog::{Catalog, CatalogImage, Domain, EmbeddingMatrix};
    use cbir_core::metrics::evaluate;
    use cbir_core::vecindex::IndexSpec;
    use std::cell::Cell;

    fn tiny() -> (Catalog, EmbeddingMatrix) {
        let mut images = Vec::new();
        let mut emb = EmbeddingMatrix::new(2).unwrap();
        for i in 0..40u64 {
            let a = i as f32 * 0.3;
            let domain = if i % 4 == 3 { Domain::Query } else { Domain::Catalog };
            images.push(CatalogImage {
                image_id: i,
                product_id: i / 4,
                tlc_id: (i / 20) as u32,
                domain,
            });
            emb.push(i, &[a.cos(), a.sin()]).unwrap();
        }
        (Catalog::new(images).unwrap(), emb)
    }

    /// Advances by `step` on every read, or goes backwards once asked.
    struct ScriptedClock {
        now: Cell<u64>,
        backwards_at: Option<u64>,
        reads: Cell<u64>,
    }

    impl Clock for ScriptedClock {
        fn now_ns(&self) -> u64 {
            let r = self.reads.get() + 1;
            self.reads.set(r);
            if Some(r) == self.backwards_at {
                self.now.set(0);
            } else {
                self.now.set(self.now.get() + 10);
            }
            self.now.get()
        }
    }

    #[test]
    fn parallel_matches_sequential() {
        let (cat, emb) = tiny();
        let eng = BaselineEngine::build(&cat, &emb, IndexSpec::Flat, 1).unwrap();
        let qs = QuerySet::from_catalog(&cat, &emb).unwrap();
        let rel = Relevance::from_catalog(&cat);
        let cfg = RetrievalConfig::default();
        assert_eq!(
            evaluate_parallel(&eng, &qs, &rel, &cfg, false).unwrap(),
            evaluate(&eng, &qs, &rel, &cfg, false).unwrap()
        );
    }

    #[test]
    fn latency_samples_decompose() {
        let (cat, emb) = tiny();
        let eng = BaselineEngine::build(&cat, &emb, IndexSpec::Flat, 1).unwrap();
        let qs = QuerySet::from_catalog(&cat, &emb).unwrap();
        let cfg = LatencyConfig {
            warmup: 3,
            measured: 100,
            repetitions: 2,
        };
        let clock = crate::clock::StdClock::new();
        let s = measure_latency(&eng, &qs, &RetrievalConfig::default(), &cfg, &clock).unwrap();
        assert_eq!(s.len(), 200);
        for x in &s {
            let max_stage = x.route_ns.max(x.search_ns).max(x.merge_ns);
            assert!(x.total_ns >= max_stage);
        }
        assert_eq!(s[0].query_index, 0);
        assert_eq!(s[100].query_index, 0);
        assert_eq!(s[11].query_index, 1);
    }

    #[test]
    fn backwards_clock_is_a_measurement_error() {
        let (cat, emb) = tiny();
        let eng = BaselineEngine::build(&cat, &emb, IndexSpec::Flat, 1).unwrap();
        let qs = QuerySet::from_catalog(&cat, &emb).unwrap();
        let clock = ScriptedClock {
            now: Cell::new(1000),
            backwards_at: Some(40),
            reads: Cell::new(0),
        };
        let cfg = LatencyConfig {
            warmup: 1,
            measured: 100,
            repetitions: 1,
        };
        let err = measure_latency(&eng, &qs, &RetrievalConfig::default(), &cfg, &clock).unwrap_err();
        assert!(matches!(err, Error::Measurement(_)), "{err}");
    }

    #[test]
    fn latency_config_bounds() {
        let ok = LatencyConfig::default();
        assert!(ok.validate().is_ok());
        assert!(LatencyConfig { warmup: 0, ..ok }.validate().is_err());
        assert!(LatencyConfig { measured: 99, ..ok }.validate().is_err());
    }

    #[test]
    fn throughput_counts_every_query() {
        let (cat, emb) = tiny();
        let eng = BaselineEngine::build(&cat, &emb, IndexSpec::Flat, 1).unwrap();
        let qs = QuerySet::from_catalog(&cat, &emb).unwrap();
        let qps = measure_throughput(&eng, &qs, &RetrievalConfig::default(), 3, 2).unwrap();
        assert!(qps > 0.0);
    }
}
