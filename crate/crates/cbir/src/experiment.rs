//! Experiment configuration and the baseline-vs-cascade benchmark run.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use cbir_core::cascade::{BaselineEngine, CascadeEngine, RetrievalConfig, Router};
use cbir_core::catalog::{Catalog, EmbeddingMatrix, TlcId};
use cbir_core::metrics::{aggregate, QualityMetrics, QueryScore, QuerySet, Relevance};
use cbir_core::router::{holdout_split, train, OracleRouter, TrainConfig};
use cbir_core::synthgen::{generate, SynthConfig};
use cbir_core::vecindex::IndexSpec;
use log::info;
use serde::{Deserialize, Serialize};

use crate::bench::{measure_latency, measure_throughput, score_parallel, LatencyConfig, SharedRetriever};
use crate::clock::StdClock;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::formats::router_file::TrainingMeta;
use crate::formats::write_file;
use crate::report::{
    canonical_json, compare, render_comparison, render_report, ComparisonReport, MetricsReport,
    ReportFormat, StageLatency, DEFINITIONS,
};

/// Mean relative improvement (%) of the cascade over the baseline for the
/// `reference` preset, frozen from its first verified run.
pub const REFERENCE_MEAN_IMPROVEMENT_PCT: f64 = 1.77406431;
pub const IMPROVEMENT_TOLERANCE_PCT: f64 = 2.0;
pub const MIN_ROUTER_ACCURACY: f64 = 0.90;
pub const MAX_DECOMPOSITION_GAP: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EngineMode {
    Baseline,
    Cascade,
    Both,
}

impl EngineMode {
    pub fn baseline(self) -> bool {
        matches!(self, EngineMode::Baseline | EngineMode::Both)
    }

    pub fn cascade(self) -> bool {
        matches!(self, EngineMode::Cascade | EngineMode::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RouterChoice {
    Softmax(TrainConfig),
    Oracle { accuracy: f64, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub warmup: usize,
    pub measured: usize,
    pub repetitions: usize,
    /// Threads for the throughput pass; 0 skips it.
    pub throughput_workers: usize,
    /// Dataset seeds to run; empty means the synth config's own seed.
    pub seeds: Vec<u64>,
    pub mode: EngineMode,
    /// With an oracle cascade, also train this softmax router and report
    /// its held-out accuracy.
    pub router_probe: Option<TrainConfig>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let l = LatencyConfig::default();
        BenchConfig {
            warmup: l.warmup,
            measured: l.measured,
            repetitions: l.repetitions,
            throughput_workers: 0,
            seeds: Vec::new(),
            mode: EngineMode::Both,
            router_probe: None,
        }
    }
}

impl BenchConfig {
    pub fn latency(&self) -> LatencyConfig {
        LatencyConfig {
            warmup: self.warmup,
            measured: self.measured,
            repetitions: self.repetitions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub index: IndexSpec,
    pub router: RouterChoice,
    pub retrieval: RetrievalConfig,
    pub bench: BenchConfig,
    /// Fraction of query images held out from router training; every
    /// reported metric is computed on this split.
    pub holdout_fraction: f64,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl ExperimentConfig {
    /// Flat indexes, oracle router at accuracy 1.0, softmax router probe.
    pub fn reference() -> Self {
        let synth = SynthConfig::reference();
        ExperimentConfig {
            router: RouterChoice::Oracle {
                accuracy: 1.0,
                seed: synth.seed,
            },
            synth,
            index: IndexSpec::Flat,
            retrieval: RetrievalConfig::default(),
            bench: BenchConfig {
                router_probe: Some(TrainConfig::default()),
                ..BenchConfig::default()
            },
            holdout_fraction: 0.2,
            out_dir: PathBuf::from("out"),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "reference" => Ok(Self::reference()),
            other => Err(Error::Usage(format!("unknown preset {other:?} (known: reference)"))),
        }
    }

    /// Whether the quality-relevant settings equal the reference preset,
    /// which is what the frozen regression number applies to.
    pub fn is_reference(&self) -> bool {
        let r = Self::reference();
        self.synth == r.synth
            && self.index == r.index
            && self.router == r.router
            && self.retrieval == r.retrieval
            && self.holdout_fraction == r.holdout_fraction
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.retrieval.validate()?;
        self.bench.latency().validate()?;
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::Usage("holdout_fraction must lie in (0, 1)".into()));
        }
        if let RouterChoice::Softmax(t) = &self.router {
            t.validate()?;
        }
        if let Some(t) = &self.bench.router_probe {
            t.validate()?;
        }
        Ok(())
    }
}

/// Train/held-out query split shared by router training and evaluation.
pub struct Split {
    pub train: QuerySet,
    pub heldout: QuerySet,
}

pub fn split_queries(catalog: &Catalog, emb: &EmbeddingMatrix, fraction: f64, seed: u64) -> Result<Split> {
    let all = QuerySet::from_catalog(catalog, emb)?;
    let (tr, ho) = holdout_split(all.len(), fraction, seed);
    let pick = |idx: &[usize]| QuerySet {
        entries: idx.iter().map(|&i| all.entries[i].clone()).collect(),
    };
    Ok(Split {
        train: pick(&tr),
        heldout: pick(&ho),
    })
}

fn as_matrix(q: &QuerySet, dim: usize) -> Result<(EmbeddingMatrix, Vec<TlcId>)> {
    let mut m = EmbeddingMatrix::with_capacity(dim, q.len())?;
    let mut labels = Vec::with_capacity(q.len());
    for e in &q.entries {
        m.push(e.image_id, &e.vector)?;
        labels.push(e.tlc_id);
    }
    Ok((m, labels))
}

/// Trains a softmax router on `split.train` and scores it on `split.heldout`.
pub fn train_router(
    split: &Split,
    dim: usize,
    config: &TrainConfig,
    holdout_fraction: f64,
) -> Result<(cbir_core::router::SoftmaxRouter, TrainingMeta)> {
    let (xm, y) = as_matrix(&split.train, dim)?;
    let (router, rep) = train(&xm, &y, config)?;
    let rows: Vec<&[f32]> = split.heldout.entries.iter().map(|e| e.vector.as_slice()).collect();
    let labels: Vec<TlcId> = split.heldout.entries.iter().map(|e| e.tlc_id).collect();
    let heldout_accuracy = if rows.is_empty() {
        0.0
    } else {
        router.accuracy(&rows, &labels)?
    };
    let meta = TrainingMeta {
        config: *config,
        initial_loss: rep.initial_loss,
        final_loss: rep.final_loss(),
        epoch_losses: rep.epoch_losses,
        holdout_fraction,
        heldout_accuracy,
        train_samples: split.train.len(),
        heldout_samples: split.heldout.len(),
    };
    Ok((router, meta))
}

pub fn make_router(
    choice: &RouterChoice,
    catalog: &Catalog,
    split: &Split,
    dim: usize,
    holdout_fraction: f64,
) -> Result<(Router, Option<TrainingMeta>)> {
    match choice {
        RouterChoice::Softmax(t) => {
            let (r, meta) = train_router(split, dim, t, holdout_fraction)?;
            Ok((Router::Softmax(r), Some(meta)))
        }
        RouterChoice::Oracle { accuracy, seed } => Ok((
            Router::Oracle(OracleRouter::new(
                *accuracy,
                catalog.tlc_ids().iter().copied().collect(),
                *seed,
            )?),
            None,
        )),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckResult {
            name: name.into(),
            passed,
            detail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOutcome {
    pub seed: u64,
    pub baseline: Option<MetricsReport>,
    pub cascade: Option<MetricsReport>,
    pub comparison: Option<ComparisonReport>,
    pub router_training: Option<TrainingMeta>,
    pub checks: Vec<CheckResult>,
}

impl BenchOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn confuser_metrics(
    scores: &[QueryScore],
    queries: &QuerySet,
    confusers: Option<&BTreeSet<u64>>,
) -> Option<QualityMetrics> {
    let confusers = confusers?;
    let picked: Vec<QueryScore> = scores
        .iter()
        .zip(&queries.entries)
        .filter(|(_, e)| confusers.contains(&e.product_id))
        .map(|(s, _)| *s)
        .collect();
    (!picked.is_empty()).then(|| aggregate(&picked))
}

struct EngineRun<'a> {
    engine: &'a SharedRetriever,
    name: &'static str,
    routed: bool,
}

fn run_engine(
    run: EngineRun<'_>,
    cfg: &ExperimentConfig,
    data: &Dataset,
    split: &Split,
    relevance: &Relevance,
    fingerprint: &str,
) -> Result<MetricsReport> {
    info!("{}: scoring {} held-out queries", run.name, split.heldout.len());
    let scores = score_parallel(run.engine, &split.heldout, relevance, &cfg.retrieval, run.routed)?;
    let quality = aggregate(&scores);
    let confuser_quality = confuser_metrics(&scores, &split.heldout, data.confuser_products.as_ref());
    info!("{}: measuring latency", run.name);
    let samples = measure_latency(
        run.engine,
        &split.heldout,
        &cfg.retrieval,
        &cfg.bench.latency(),
        &StdClock::new(),
    )?;
    let throughput_qps = if cfg.bench.throughput_workers > 0 {
        Some(measure_throughput(
            run.engine,
            &split.heldout,
            &cfg.retrieval,
            cfg.bench.throughput_workers,
            1,
        )?)
    } else {
        None
    };
    let report = MetricsReport {
        label: format!("{}-{}", run.name, cfg.synth.seed),
        engine: run.name.into(),
        index_kind: cfg.index.kind(),
        k: cfg.retrieval.k,
        route_top_m: run.routed.then_some(cfg.retrieval.route_top_m),
        quality,
        confuser_quality,
        latency_ns: Some(StageLatency::from_samples(&samples)),
        throughput_qps,
        latency_samples: samples,
        fingerprint: fingerprint.into(),
        config: serde_json::to_value(cfg)?,
        definitions: DEFINITIONS.iter().map(|s| s.to_string()).collect(),
    };
    report.validate()?;
    Ok(report)
}

fn write_report_files(dir: &Path, stem: &str, r: &MetricsReport) -> Result<()> {
    write_file(&dir.join(format!("{stem}.json")), &render_report(r, ReportFormat::Json)?)?;
    write_file(&dir.join(format!("{stem}.md")), &render_report(r, ReportFormat::Markdown)?)?;
    write_file(&dir.join(format!("{stem}_latency.csv")), &render_report(r, ReportFormat::Csv)?)
}

/// One full benchmark over `data` (generated from `cfg.synth` when absent),
/// writing reports under `out`.
pub fn run_bench_once(cfg: &ExperimentConfig, data: Option<Dataset>, out: &Path) -> Result<BenchOutcome> {
    cfg.validate()?;
    let mode = cfg.bench.mode;
    write_file(&out.join("resolved_config.json"), &canonical_json(cfg)?)?;
    let data = match data {
        Some(d) => d,
        None => {
            info!("generating dataset (seed {})", cfg.synth.seed);
            Dataset::from_synth(generate(&cfg.synth)?)?
        }
    };
    let reference_data = cfg.is_reference() && data.synth_config.as_ref() == Some(&cfg.synth);
    let fp = data.fingerprint();
    let split = split_queries(&data.catalog, &data.embeddings, cfg.holdout_fraction, cfg.synth.seed)?;
    let relevance = Relevance::from_catalog(&data.catalog);

    let baseline = if mode.baseline() {
        info!("building baseline");
        let eng = BaselineEngine::build(&data.catalog, &data.embeddings, cfg.index, 1)?;
        let run = EngineRun {
            engine: &eng,
            name: "baseline",
            routed: false,
        };
        Some(run_engine(run, cfg, &data, &split, &relevance, &fp)?)
    } else {
        None
    };

    let mut router_training = None;
    let cascade = if mode.cascade() {
        info!("preparing router");
        let (router, meta) = make_router(&cfg.router, &data.catalog, &split, data.embeddings.dim(), cfg.holdout_fraction)?;
        router_training = meta;
        if let (None, Some(probe)) = (&router_training, &cfg.bench.router_probe) {
            info!("training probe router");
            router_training = Some(train_router(&split, data.embeddings.dim(), probe, cfg.holdout_fraction)?.1);
        }
        info!("building cascade");
        let eng = CascadeEngine::build(&data.catalog, &data.embeddings, router, cfg.index, 1)?;
        let run = EngineRun {
            engine: &eng,
            name: "cascade",
            routed: true,
        };
        Some(run_engine(run, cfg, &data, &split, &relevance, &fp)?)
    } else {
        None
    };

    if let Some(b) = &baseline {
        write_report_files(out, "baseline", b)?;
    }
    if let Some(c) = &cascade {
        write_report_files(out, "cascade", c)?;
    }
    if let Some(t) = &router_training {
        write_file(&out.join("router_training.json"), &canonical_json(t)?)?;
    }
    let comparison = match (&baseline, &cascade) {
        (Some(b), Some(c)) => {
            let cmp = compare(b, c)?;
            write_file(&out.join("comparison.json"), &render_comparison(&cmp, ReportFormat::Json)?)?;
            write_file(&out.join("comparison.md"), &render_comparison(&cmp, ReportFormat::Markdown)?)?;
            write_file(&out.join("comparison.csv"), &render_comparison(&cmp, ReportFormat::Csv)?)?;
            Some(cmp)
        }
        _ => None,
    };

    let mut outcome = BenchOutcome {
        seed: cfg.synth.seed,
        baseline,
        cascade,
        comparison,
        router_training,
        checks: Vec::new(),
    };
    outcome.checks = threshold_checks(&outcome, reference_data);
    write_file(&out.join("checks.json"), &canonical_json(&outcome.checks)?)?;
    Ok(outcome)
}

/// Runs every configured seed; with more than one, each lands in
/// `out/seed-<n>/`.
pub fn run_bench(cfg: &ExperimentConfig, data: Option<Dataset>) -> Result<Vec<BenchOutcome>> {
    if data.is_some() || cfg.bench.seeds.len() <= 1 {
        let mut c = cfg.clone();
        if let Some(&s) = cfg.bench.seeds.first() {
            c.synth.seed = s;
        }
        return Ok(vec![run_bench_once(&c, data, &cfg.out_dir)?]);
    }
    write_file(&cfg.out_dir.join("resolved_config.json"), &canonical_json(cfg)?)?;
    let mut outcomes = Vec::new();
    for &seed in &cfg.bench.seeds {
        let mut c = cfg.clone();
        c.synth.seed = seed;
        c.out_dir = cfg.out_dir.join(format!("seed-{seed}"));
        outcomes.push(run_bench_once(&c, None, &c.out_dir)?);
    }
    let summary: Vec<(u64, Option<f64>)> = outcomes
        .iter()
        .map(|o| (o.seed, o.comparison.as_ref().and_then(|c| c.mean_improvement_pct)))
        .collect();
    write_file(&cfg.out_dir.join("seeds_summary.json"), &canonical_json(&summary)?)?;
    Ok(outcomes)
}

/// The `bench --check` thresholds.
/// `reference_data` adds the frozen-value check; set it only when the
/// evaluated data was generated by the reference preset.
pub fn threshold_checks(o: &BenchOutcome, reference_data: bool) -> Vec<CheckResult> {
    let mut checks = Vec::new();
    if let Some(t) = &o.router_training {
        checks.push(CheckResult::new(
            "router_heldout_accuracy",
            t.heldout_accuracy >= MIN_ROUTER_ACCURACY,
            format!("{:.4} (min {MIN_ROUTER_ACCURACY})", t.heldout_accuracy),
        ));
    }
    for r in o.baseline.iter().chain(&o.cascade) {
        if let Some(l) = &r.latency_ns {
            let gap = l.decomposition_gap();
            checks.push(CheckResult::new(
                &format!("{}_latency_decomposition", r.engine),
                gap.is_some_and(|g| g <= MAX_DECOMPOSITION_GAP),
                format!("gap {gap:?} (max {MAX_DECOMPOSITION_GAP})"),
            ));
        }
    }
    let (Some(b), Some(c), Some(cmp)) = (&o.baseline, &o.cascade, &o.comparison) else {
        checks.push(CheckResult::new(
            "comparison",
            false,
            "threshold checks need --mode both".into(),
        ));
        return checks;
    };
    match (&b.confuser_quality, &c.confuser_quality) {
        (Some(bq), Some(cq)) => checks.push(CheckResult::new(
            "confuser_recall_at_1",
            cq.recall_at_1 > bq.recall_at_1,
            format!("cascade {:.4} vs baseline {:.4}", cq.recall_at_1, bq.recall_at_1),
        )),
        _ => checks.push(CheckResult::new(
            "confuser_recall_at_1",
            true,
            "skipped: dataset has no confuser labels".into(),
        )),
    }
    let mean = cmp.mean_improvement_pct;
    checks.push(CheckResult::new(
        "mean_improvement_positive",
        mean.is_some_and(|m| m > 0.0),
        format!("{mean:?}"),
    ));
    if reference_data {
        checks.push(CheckResult::new(
            "mean_improvement_frozen",
            mean.is_some_and(|m| (m - REFERENCE_MEAN_IMPROVEMENT_PCT).abs() <= IMPROVEMENT_TOLERANCE_PCT),
            format!("{mean:?} vs frozen {REFERENCE_MEAN_IMPROVEMENT_PCT} ± {IMPROVEMENT_TOLERANCE_PCT}"),
        ));
    }
    checks
}
