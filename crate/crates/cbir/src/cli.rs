//! The `cbir` command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 a `bench --check`
//! threshold failed.

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use cbir_core::cascade::{BaselineEngine, CascadeEngine, RetrievalConfig, Retriever, Router};
use cbir_core::catalog::normalized;
use cbir_core::cascade::QueryHint;
use cbir_core::synthgen::generate;
use cbir_core::vecindex::{HnswParams, IndexSpec};
use log::info;
use serde::Serialize;
use serde_json::{json, Value};

use crate::clock::StdClock;
use crate::dataset::{save_synth, Dataset};
use crate::error::{Error, Result};
use crate::experiment::{
    make_router, run_bench, split_queries, train_router, EngineMode, ExperimentConfig, RouterChoice,
};
use crate::formats::catalog_jsonl::load_catalog;
use crate::formats::cemb::load_embeddings;
use crate::formats::manifest::{load_engines, save_engines, SaveRequest};
use crate::formats::router_file::{save_router, RouterFile};
use crate::formats::{read_file, write_file};
use crate::report::{canonical_json, compare, render_comparison, MetricsReport, ReportFormat};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_THRESHOLD: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "cbir", version, about = "Cascade cross-domain image retrieval: synth, build, search, bench")]
struct Cli {
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config JSON; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Validate a catalog / embedding pair and print its summary.
    Ingest(IngestArgs),
    /// Build baseline and/or cascade engines and save them.
    Build(BuildArgs),
    /// Train the softmax router on query-domain images.
    TrainRouter(TrainArgs),
    /// Query a saved engine.
    Search(SearchArgs),
    /// Baseline-vs-cascade benchmark.
    Bench(BenchArgs),
    /// Compare two metrics reports.
    Compare(CompareArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    num_tlcs: Option<usize>,
    #[arg(long)]
    products_per_tlc: Option<usize>,
    #[arg(long)]
    catalog_images_per_product: Option<usize>,
    #[arg(long)]
    query_images_per_product: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    tlc_spread: Option<f64>,
    #[arg(long)]
    image_noise: Option<f64>,
    #[arg(long)]
    query_noise: Option<f64>,
    #[arg(long)]
    domain_shift: Option<f64>,
    #[arg(long)]
    confuser_fraction: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
struct IngestArgs {
    /// Data directory holding embeddings.cemb and catalog.jsonl.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    catalog: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum IndexArg {
    Flat,
    Hnsw,
}

#[derive(Debug, Args, Serialize)]
struct IndexArgs {
    #[arg(long, value_enum)]
    index: Option<IndexArg>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    ef_construction: Option<usize>,
    #[arg(long)]
    ef_search: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct BuildArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    mode: EngineMode,
    #[command(flatten)]
    index: IndexArgs,
    /// Router JSON to use instead of training one.
    #[arg(long)]
    router: Option<PathBuf>,
    /// Use the oracle router with this top-1 accuracy.
    #[arg(long, conflicts_with = "router")]
    oracle_accuracy: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    l2_lambda: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum SearchModeArg {
    Baseline,
    Cascade,
}

#[derive(Debug, Args, Serialize)]
struct SearchArgs {
    /// Engine directory written by `build`.
    #[arg(long)]
    engine: PathBuf,
    /// Data directory, for product ids and --query-id lookups.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Comma-separated query vector.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "query_id")]
    vector: Option<String>,
    /// Use a stored image as the query.
    #[arg(long)]
    query_id: Option<u64>,
    #[arg(long, value_enum, default_value = "cascade")]
    mode: SearchModeArg,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 1)]
    top_m: usize,
    #[arg(long)]
    ef_search: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
struct BenchArgs {
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_enum)]
    mode: Option<EngineMode>,
    /// Exit 3 unless every regression threshold holds.
    #[arg(long)]
    check: bool,
    /// Benchmark an existing data directory instead of generating one.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    index: IndexArgs,
    #[arg(long)]
    oracle_accuracy: Option<f64>,
    #[arg(long)]
    top_m: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    measured: Option<usize>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    /// Comma-separated dataset seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Debug, Args, Serialize)]
struct CompareArgs {
    baseline: PathBuf,
    cascade: PathBuf,
    /// Format printed to stdout; all three are written under --out.
    #[arg(long, value_enum, default_value = "markdown")]
    format: ReportFormat,
}

#[derive(Debug, Args, Serialize)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long)]
    data: Option<PathBuf>,
}

/// Global flags plus the experiment config they resolve to.
struct Ctx {
    out: PathBuf,
    cfg: ExperimentConfig,
}

fn base_config(cli: &Cli, preset: Option<&str>) -> Result<ExperimentConfig> {
    let mut cfg = match preset {
        Some(p) => ExperimentConfig::preset(p)?,
        None => ExperimentConfig::reference(),
    };
    if let Some(path) = &cli.config {
        cfg = serde_json::from_slice(&read_file(path)?)
            .map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
    }
    if let Some(s) = cli.seed {
        cfg.synth.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn apply_index(cfg: &mut ExperimentConfig, a: &IndexArgs) {
    let hnsw_flags = a.m.is_some() || a.ef_construction.is_some() || a.ef_search.is_some();
    let kind = a.index.or(match (hnsw_flags, cfg.index) {
        (true, IndexSpec::Flat) => Some(IndexArg::Hnsw),
        _ => None,
    });
    match kind {
        Some(IndexArg::Flat) => cfg.index = IndexSpec::Flat,
        Some(IndexArg::Hnsw) if !matches!(cfg.index, IndexSpec::Hnsw(_)) => {
            cfg.index = IndexSpec::Hnsw(HnswParams::default())
        }
        _ => {}
    }
    if let IndexSpec::Hnsw(p) = &mut cfg.index {
        if let Some(m) = a.m {
            p.m = m;
        }
        if let Some(e) = a.ef_construction {
            p.ef_construction = e;
        }
        if let Some(e) = a.ef_search {
            p.ef_search = e;
        }
    }
}

fn write_resolved(out: &Path, command: &str, args: &impl Serialize, cfg: &ExperimentConfig) -> Result<()> {
    let v = json!({ "command": command, "args": args, "experiment": cfg });
    write_file(&out.join("resolved_config.json"), &canonical_json(&v)?)
}

fn print_json(v: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn cmd_synth(ctx: &Ctx, a: &SynthArgs) -> Result<i32> {
    let mut s = ctx.cfg.synth.clone();
    macro_rules! set {
        ($($f:ident <- $arg:ident),*) => { $( if let Some(v) = a.$arg { s.$f = v; } )* };
    }
    set!(num_tlcs <- num_tlcs, products_per_tlc <- products_per_tlc,
         catalog_images_per_product <- catalog_images_per_product,
         query_images_per_product <- query_images_per_product, dim <- dim,
         tlc_spread <- tlc_spread, image_noise <- image_noise, query_noise <- query_noise,
         domain_shift <- domain_shift, confuser_fraction <- confuser_fraction);
    let mut cfg = ctx.cfg.clone();
    cfg.synth = s;
    write_resolved(&ctx.out, "synth", a, &cfg)?;
    info!("generating {} images", cfg.synth.num_tlcs * cfg.synth.products_per_tlc
        * (cfg.synth.catalog_images_per_product + cfg.synth.query_images_per_product));
    let data = generate(&cfg.synth)?;
    save_synth(&ctx.out, &data)?;
    print_json(&cfg.synth)?;
    Ok(EXIT_OK)
}

fn load_data(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir)
}

fn cmd_ingest(ctx: &Ctx, a: &IngestArgs) -> Result<i32> {
    write_resolved(&ctx.out, "ingest", a, &ctx.cfg)?;
    let d = match (&a.data, &a.embeddings, &a.catalog) {
        (Some(dir), None, None) => load_data(dir)?,
        (None, Some(e), Some(c)) => Dataset::new(load_catalog(c)?, load_embeddings(e)?)?,
        _ => return Err(Error::Usage("give --data DIR, or both --embeddings and --catalog".into())),
    };
    let v = json!({ "summary": d.summary, "fingerprint": d.fingerprint() });
    write_file(&ctx.out.join("ingest_summary.json"), &canonical_json(&v)?)?;
    print_json(&v)?;
    Ok(EXIT_OK)
}

fn cmd_train(ctx: &Ctx, a: &TrainArgs) -> Result<i32> {
    let mut cfg = ctx.cfg.clone();
    let mut t = match cfg.router {
        RouterChoice::Softmax(t) => t,
        RouterChoice::Oracle { .. } => Default::default(),
    };
    if let Some(v) = a.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.l2_lambda {
        t.l2_lambda = v;
    }
    if let Some(h) = a.holdout {
        cfg.holdout_fraction = h;
    }
    cfg.router = RouterChoice::Softmax(t);
    cfg.validate()?;
    write_resolved(&ctx.out, "train-router", a, &cfg)?;
    let d = load_data(&a.data)?;
    let split = split_queries(&d.catalog, &d.embeddings, cfg.holdout_fraction, cfg.synth.seed)?;
    let (router, meta) = train_router(&split, d.embeddings.dim(), &t, cfg.holdout_fraction)?;
    save_router(&ctx.out.join("router.json"), &RouterFile::new(&router, Some(meta.clone())))?;
    print_json(&meta)?;
    Ok(EXIT_OK)
}

fn cmd_build(ctx: &Ctx, a: &BuildArgs) -> Result<i32> {
    let mut cfg = ctx.cfg.clone();
    apply_index(&mut cfg, &a.index);
    if let Some(acc) = a.oracle_accuracy {
        cfg.router = RouterChoice::Oracle {
            accuracy: acc,
            seed: cfg.synth.seed,
        };
    }
    if let IndexSpec::Hnsw(p) = &cfg.index {
        p.validate()?;
    }
    write_resolved(&ctx.out, "build", a, &cfg)?;
    let d = load_data(&a.data)?;
    let baseline = if a.mode.baseline() {
        info!("building baseline");
        Some(BaselineEngine::build(&d.catalog, &d.embeddings, cfg.index, 1)?)
    } else {
        None
    };
    let mut training = None;
    let cascade = if a.mode.cascade() {
        let router = match &a.router {
            Some(p) => Router::Softmax(crate::formats::router_file::load_router(p)?.router()?),
            None => {
                let split = split_queries(&d.catalog, &d.embeddings, cfg.holdout_fraction, cfg.synth.seed)?;
                let (r, meta) = make_router(&cfg.router, &d.catalog, &split, d.embeddings.dim(), cfg.holdout_fraction)?;
                training = meta;
                r
            }
        };
        info!("building cascade");
        Some(CascadeEngine::build(&d.catalog, &d.embeddings, router, cfg.index, 1)?)
    } else {
        None
    };
    let manifest = save_engines(
        &ctx.out,
        SaveRequest {
            baseline: baseline.as_ref(),
            cascade: cascade.as_ref(),
            router_training: training,
            fingerprint: Some(d.fingerprint()),
            build_version: 1,
        },
    )?;
    print_json(&manifest)?;
    Ok(EXIT_OK)
}

fn parse_vector(s: &str) -> Result<Vec<f32>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f32>()
                .map_err(|e| Error::Usage(format!("bad vector component {t:?}: {e}")))
        })
        .collect()
}

fn cmd_search(ctx: &Ctx, a: &SearchArgs) -> Result<i32> {
    write_resolved(&ctx.out, "search", a, &ctx.cfg)?;
    let set = load_engines(&a.engine)?;
    let data = a.data.as_deref().map(load_data).transpose()?;
    let (vector, hint) = match (&a.vector, a.query_id) {
        (Some(v), None) => (normalized(&parse_vector(v)?)?, QueryHint::default()),
        (None, Some(id)) => {
            let d = data
                .as_ref()
                .ok_or_else(|| Error::Usage("--query-id needs --data".into()))?;
            let v = d
                .embeddings
                .get(id)
                .ok_or_else(|| Error::Usage(format!("image {id} is not in the data directory")))?;
            let hint = QueryHint {
                true_tlc: d.catalog.get(id).map(|i| i.tlc_id),
                key: id,
            };
            (v.to_vec(), hint)
        }
        _ => return Err(Error::Usage("give exactly one of --vector, --query-id".into())),
    };
    let engine: &dyn Retriever = match a.mode {
        SearchModeArg::Baseline => set.baseline.as_ref().map(|e| e as &dyn Retriever),
        SearchModeArg::Cascade => set.cascade.as_ref().map(|e| e as &dyn Retriever),
    }
    .ok_or_else(|| Error::Usage(format!("engine directory has no {:?} engine", a.mode)))?;
    let cfg = RetrievalConfig {
        k: a.k,
        route_top_m: a.top_m,
        ef_search: a.ef_search,
    };
    let out = engine.retrieve(&vector, &hint, &cfg, &StdClock::new())?;
    let results: Vec<Value> = out
        .results
        .iter()
        .map(|r| {
            let product = data.as_ref().and_then(|d| d.catalog.get(r.image_id)).map(|i| i.product_id);
            json!({ "image_id": r.image_id, "product_id": product, "score": r.score })
        })
        .collect();
    let v = json!({ "build_version": out.trace.build_version, "results": results, "trace": out.trace });
    write_file(&ctx.out.join("search_result.json"), &canonical_json(&v)?)?;
    print_json(&v)?;
    Ok(EXIT_OK)
}

fn cmd_bench(cli: &Cli, a: &BenchArgs) -> Result<i32> {
    let mut cfg = base_config(cli, a.preset.as_deref())?;
    apply_index(&mut cfg, &a.index);
    if let Some(m) = a.mode {
        cfg.bench.mode = m;
    }
    if let Some(acc) = a.oracle_accuracy {
        cfg.router = RouterChoice::Oracle {
            accuracy: acc,
            seed: cfg.synth.seed,
        };
    }
    if let Some(m) = a.top_m {
        cfg.retrieval.route_top_m = m;
    }
    if let Some(v) = a.warmup {
        cfg.bench.warmup = v;
    }
    if let Some(v) = a.measured {
        cfg.bench.measured = v;
    }
    if let Some(v) = a.repetitions {
        cfg.bench.repetitions = v;
    }
    if let Some(v) = a.workers {
        cfg.bench.throughput_workers = v;
    }
    if let Some(s) = &a.seeds {
        cfg.bench.seeds = s.clone();
    }
    if let IndexSpec::Hnsw(p) = &cfg.index {
        p.validate()?;
    }
    let data = a.data.as_deref().map(load_data).transpose()?;
    let outcomes = run_bench(&cfg, data)?;
    let mut passed = true;
    for o in &outcomes {
        if let Some(c) = &o.comparison {
            print!("{}", String::from_utf8_lossy(&render_comparison(c, ReportFormat::Markdown)?));
        }
        for c in &o.checks {
            println!("check {} [seed {}]: {} ({})", c.name, o.seed, if c.passed { "PASS" } else { "FAIL" }, c.detail);
        }
        passed &= o.passed();
    }
    Ok(if a.check && !passed { EXIT_THRESHOLD } else { EXIT_OK })
}

fn cmd_compare(ctx: &Ctx, a: &CompareArgs) -> Result<i32> {
    write_resolved(&ctx.out, "compare", a, &ctx.cfg)?;
    let read = |p: &Path| -> Result<MetricsReport> {
        serde_json::from_slice(&read_file(p)?).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
    };
    let cmp = compare(&read(&a.baseline)?, &read(&a.cascade)?)?;
    for (f, name) in [
        (ReportFormat::Json, "comparison.json"),
        (ReportFormat::Markdown, "comparison.md"),
        (ReportFormat::Csv, "comparison.csv"),
    ] {
        write_file(&ctx.out.join(name), &render_comparison(&cmp, f)?)?;
    }
    print!("{}", String::from_utf8_lossy(&render_comparison(&cmp, a.format)?));
    Ok(EXIT_OK)
}

fn cmd_serve(a: &ServeArgs) -> Result<i32> {
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| Error::Usage(format!("bad --host/--port: {e}")))?;
    crate::service::serve_forever(addr, a.data.clone())?;
    Ok(EXIT_OK)
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let preset = match &cli.command {
        Command::Synth(a) => a.preset.as_deref(),
        _ => None,
    };
    let cfg = base_config(cli, preset)?;
    let ctx = Ctx {
        out: cfg.out_dir.clone(),
        cfg,
    };
    match &cli.command {
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Ingest(a) => cmd_ingest(&ctx, a),
        Command::Build(a) => cmd_build(&ctx, a),
        Command::TrainRouter(a) => cmd_train(&ctx, a),
        Command::Search(a) => cmd_search(&ctx, a),
        Command::Bench(a) => cmd_bench(cli, a),
        Command::Compare(a) => cmd_compare(&ctx, a),
        Command::Serve(a) => cmd_serve(a),
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Usage(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            }
        }
    }
}
