//! HTTP/JSON query service.
//!
//! `POST /v1/ingest` stages a dataset, `POST /v1/build` builds engines off
//! the request path and swaps them in atomically, `POST /v1/search` answers
//! a query against whichever engine version is current when it starts.
//! `GET /v1/healthz` and `GET /v1/stats` report status.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::DefaultBodyLimit;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Json;
use base64::Engine as _;
use cbir_core::cascade::{BaselineEngine, CascadeEngine, RetrievalConfig, Retriever, Router};
use cbir_core::catalog::{normalized, ImageId, ProductId, TlcId, ValidationSummary};
use cbir_core::router::{SoftmaxRouter, TrainConfig};
use cbir_core::vecindex::{IndexKind, IndexSpec};
use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::clock::StdClock;
use crate::dataset::{Dataset, CATALOG_FILE, EMBEDDINGS_FILE};
use crate::error::{Error, Result};
use crate::experiment::{split_queries, train_router, EngineMode};
use crate::formats::catalog_jsonl::{load_catalog, parse_catalog};
use crate::formats::cemb::{decode, load_embeddings};
use crate::formats::router_file::{load_router, TrainingMeta};

/// Inline ingest payloads carry whole datasets.
pub const MAX_INGEST_BYTES: usize = 1 << 30;

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    detail: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
            detail: Value::Null,
        }
    }

    fn with_detail(mut self, detail: Value) -> Self {
        self.detail = detail;
        self
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    /// 400 for input problems, with structured detail where the core
    /// error has some.
    fn from_data(e: Error) -> Self {
        let detail = match &e {
            Error::Core(cbir_core::Error::Mismatch {
                missing_embeddings,
                missing_catalog,
            }) => json!({
                "missing_embeddings": missing_embeddings,
                "missing_catalog": missing_catalog,
            }),
            Error::Core(cbir_core::Error::DuplicateImage(id)) => json!({ "image_id": id }),
            Error::Core(cbir_core::Error::Hierarchy {
                product_id,
                first,
                second,
            }) => json!({ "product_id": product_id, "tlc_ids": [first, second] }),
            _ => Value::Null,
        };
        Self::new(StatusCode::BAD_REQUEST, "invalid_data", e.to_string()).with_detail(detail)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "error": { "code": self.code, "message": self.message, "detail": self.detail }
        });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<Json<T>, ApiError>;

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> std::result::Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

/// An engine generation. Never mutated after it is published.
pub struct Served {
    pub version: u64,
    pub mode: EngineMode,
    pub index: IndexSpec,
    pub dataset: Arc<Dataset>,
    pub baseline: Option<BaselineEngine>,
    pub cascade: Option<CascadeEngine>,
}

pub struct AppState {
    data_dir: Option<PathBuf>,
    staged: RwLock<Option<Arc<Dataset>>>,
    served: RwLock<Option<Arc<Served>>>,
    router: RwLock<Option<(SoftmaxRouter, Option<TrainingMeta>)>>,
    building: AtomicBool,
    last_version: AtomicU64,
    searches: AtomicU64,
    started: Instant,
}

impl AppState {
    pub fn new(data_dir: Option<PathBuf>) -> Self {
        AppState {
            data_dir,
            staged: RwLock::new(None),
            served: RwLock::new(None),
            router: RwLock::new(None),
            building: AtomicBool::new(false),
            last_version: AtomicU64::new(0),
            searches: AtomicU64::new(0),
            started: Instant::now(),
        }
    }

    fn resolve(&self, p: &str) -> PathBuf {
        let path = Path::new(p);
        match &self.data_dir {
            Some(d) if path.is_relative() => d.join(path),
            _ => path.to_path_buf(),
        }
    }

    pub fn stage(&self, d: Dataset) {
        *self.staged.write().unwrap() = Some(Arc::new(d));
    }

    fn current(&self) -> Option<Arc<Served>> {
        self.served.read().unwrap().clone()
    }
}

/// Clears the build flag however the build ends.
struct BuildGuard<'a>(&'a AtomicBool);

impl Drop for BuildGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct IngestRequest {
    embeddings_path: Option<String>,
    catalog_path: Option<String>,
    /// Base64 of a CEMB file.
    embeddings_b64: Option<String>,
    /// Catalog JSON Lines text.
    catalog_jsonl: Option<String>,
}

#[derive(Debug, Serialize)]
struct IngestResponse {
    summary: ValidationSummary,
    fingerprint: String,
}

async fn ingest(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<IngestResponse> {
    let req: IngestRequest = parse_body(&body)?;
    if st.building.load(Ordering::SeqCst) {
        return Err(ApiError::new(StatusCode::CONFLICT, "build_in_progress", "a build is in progress"));
    }
    let st2 = st.clone();
    let dataset = tokio::task::spawn_blocking(move || -> std::result::Result<Dataset, ApiError> {
        let emb = match (&req.embeddings_path, &req.embeddings_b64) {
            (Some(p), None) => load_embeddings(&st2.resolve(p)),
            (None, Some(b)) => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(b)
                    .map_err(|e| ApiError::bad_request(format!("embeddings_b64: {e}")))?;
                decode(&bytes)
            }
            _ => return Err(ApiError::bad_request("give exactly one of embeddings_path, embeddings_b64")),
        }
        .map_err(ApiError::from_data)?;
        let cat = match (&req.catalog_path, &req.catalog_jsonl) {
            (Some(p), None) => load_catalog(&st2.resolve(p)),
            (None, Some(t)) => parse_catalog(t),
            _ => return Err(ApiError::bad_request("give exactly one of catalog_path, catalog_jsonl")),
        }
        .map_err(ApiError::from_data)?;
        Dataset::new(cat, emb).map_err(ApiError::from_data)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    if st.building.load(Ordering::SeqCst) {
        return Err(ApiError::new(StatusCode::CONFLICT, "build_in_progress", "a build is in progress"));
    }
    let resp = IngestResponse {
        summary: dataset.summary.clone(),
        fingerprint: dataset.fingerprint(),
    };
    info!(
        "staged dataset: {} catalog, {} query images",
        resp.summary.catalog_images, resp.summary.query_images
    );
    st.stage(dataset);
    Ok(Json(resp))
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
enum RouterRequest {
    /// Path to a router JSON file.
    File(String),
    /// Train on the staged query images.
    Train(TrainConfig),
}

fn default_mode() -> EngineMode {
    EngineMode::Both
}

fn default_holdout() -> f64 {
    0.2
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BuildRequest {
    #[serde(default = "default_mode")]
    mode: EngineMode,
    #[serde(default = "default_index")]
    index: IndexSpec,
    #[serde(default)]
    router: Option<RouterRequest>,
    #[serde(default = "default_holdout")]
    holdout_fraction: f64,
}

fn default_index() -> IndexSpec {
    IndexSpec::Flat
}

#[derive(Debug, Serialize)]
struct PartitionCount {
    tlc_id: TlcId,
    count: usize,
}

#[derive(Debug, Serialize)]
struct BuildResponse {
    build_version: u64,
    mode: EngineMode,
    index_kind: IndexKind,
    baseline_count: Option<usize>,
    partitions: Vec<PartitionCount>,
    router_training: Option<TrainingMeta>,
    build_ms: f64,
}

async fn build(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<BuildResponse> {
    let req: BuildRequest = parse_body(&body)?;
    if st
        .building
        .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
        .is_err()
    {
        return Err(ApiError::new(StatusCode::CONFLICT, "build_in_progress", "another build is running"));
    }
    let st2 = st.clone();
    tokio::task::spawn_blocking(move || {
        let _guard = BuildGuard(&st2.building);
        run_build(&st2, req)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
    .map(Json)
}

fn unprocessable(e: impl ToString) -> ApiError {
    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "unprocessable", e.to_string())
}

fn run_build(st: &AppState, req: BuildRequest) -> std::result::Result<BuildResponse, ApiError> {
    let t0 = Instant::now();
    let dataset = st
        .staged
        .read()
        .unwrap()
        .clone()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "not_ingested", "no dataset has been ingested"))?;
    if let IndexSpec::Hnsw(p) = &req.index {
        p.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    }

    let mut router_training = None;
    let router = if req.mode.cascade() {
        let (r, meta) = match &req.router {
            Some(RouterRequest::File(p)) => {
                let f = load_router(&st.resolve(p)).map_err(ApiError::from_data)?;
                (f.router().map_err(ApiError::from_data)?, f.training)
            }
            Some(RouterRequest::Train(cfg)) => {
                cfg.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
                if !(req.holdout_fraction > 0.0 && req.holdout_fraction < 1.0) {
                    return Err(ApiError::bad_request("holdout_fraction must lie in (0, 1)"));
                }
                let split = split_queries(&dataset.catalog, &dataset.embeddings, req.holdout_fraction, cfg.seed)
                    .map_err(unprocessable)?;
                let (r, meta) = train_router(&split, dataset.embeddings.dim(), cfg, req.holdout_fraction)
                    .map_err(unprocessable)?;
                (r, Some(meta))
            }
            None => st
                .router
                .read()
                .unwrap()
                .clone()
                .ok_or_else(|| unprocessable("cascade build needs a router: give router.file or router.train"))?,
        };
        router_training = meta.clone();
        *st.router.write().unwrap() = Some((r.clone(), meta));
        Some(r)
    } else {
        None
    };

    // Builds are exclusive (the `building` flag), so the next version is
    // known up front and is only published once everything succeeded.
    let version = st.last_version.load(Ordering::SeqCst) + 1;
    let baseline = if req.mode.baseline() {
        Some(BaselineEngine::build(&dataset.catalog, &dataset.embeddings, req.index, version).map_err(unprocessable)?)
    } else {
        None
    };
    let cascade = match router {
        Some(r) => Some(
            CascadeEngine::build(&dataset.catalog, &dataset.embeddings, Router::Softmax(r), req.index, version)
                .map_err(unprocessable)?,
        ),
        None => None,
    };

    let resp = BuildResponse {
        build_version: version,
        mode: req.mode,
        index_kind: req.index.kind(),
        baseline_count: baseline.as_ref().map(|b| b.index().len()),
        partitions: cascade
            .as_ref()
            .map(|c| {
                c.partitions()
                    .iter()
                    .map(|(t, i)| PartitionCount { tlc_id: *t, count: i.len() })
                    .collect()
            })
            .unwrap_or_default(),
        router_training,
        build_ms: t0.elapsed().as_secs_f64() * 1e3,
    };
    let next = Arc::new(Served {
        version,
        mode: req.mode,
        index: req.index,
        dataset,
        baseline,
        cascade,
    });
    *st.served.write().unwrap() = Some(next);
    st.last_version.store(version, Ordering::SeqCst);
    info!("published build version {version}");
    Ok(resp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
enum SearchMode {
    Baseline,
    Cascade,
}

fn default_k() -> usize {
    10
}

fn default_search_mode() -> SearchMode {
    SearchMode::Cascade
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SearchRequest {
    embedding: Vec<f64>,
    #[serde(default = "default_k")]
    k: usize,
    #[serde(default = "default_search_mode")]
    mode: SearchMode,
    route_top_m: Option<usize>,
    ef_search: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SearchHit {
    pub image_id: ImageId,
    pub product_id: Option<ProductId>,
    pub score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RoutedTlc {
    pub tlc_id: TlcId,
    pub probability: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SearchTrace {
    pub routed: Vec<RoutedTlc>,
    pub no_partition: bool,
    pub route_ns: u64,
    pub search_ns: u64,
    pub merge_ns: u64,
    pub total_ns: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SearchResponse {
    pub build_version: u64,
    pub mode: String,
    pub results: Vec<SearchHit>,
    pub trace: SearchTrace,
}

async fn search(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<SearchResponse> {
    let req: SearchRequest = parse_body(&body)?;
    // Pin one engine generation for the whole request.
    let served = st
        .current()
        .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "not_built", "no engine has been built yet"))?;
    let engine: &dyn Retriever = match req.mode {
        SearchMode::Baseline => served.baseline.as_ref().map(|e| e as &dyn Retriever),
        SearchMode::Cascade => served.cascade.as_ref().map(|e| e as &dyn Retriever),
    }
    .ok_or_else(|| {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "not_built",
            format!("no {:?} engine in build {}", req.mode, served.version).to_lowercase(),
        )
    })?;
    let dim = engine.dim();
    if req.embedding.len() != dim {
        return Err(ApiError::bad_request(format!(
            "embedding has {} components, expected {dim}",
            req.embedding.len()
        )));
    }
    if req.embedding.iter().any(|x| !(*x as f32).is_finite()) {
        return Err(ApiError::bad_request("embedding contains non-finite components"));
    }
    let v: Vec<f32> = req.embedding.iter().map(|&x| x as f32).collect();
    let v = normalized(&v).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let cfg = RetrievalConfig {
        k: req.k,
        route_top_m: req.route_top_m.unwrap_or(1),
        ef_search: req.ef_search,
    };
    cfg.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    let out = engine
        .retrieve(&v, &Default::default(), &cfg, &StdClock::new())
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    st.searches.fetch_add(1, Ordering::Relaxed);
    let catalog = &served.dataset.catalog;
    let t = out.trace.times;
    Ok(Json(SearchResponse {
        build_version: out.trace.build_version,
        mode: format!("{:?}", req.mode).to_lowercase(),
        results: out
            .results
            .iter()
            .map(|r| SearchHit {
                image_id: r.image_id,
                product_id: catalog.get(r.image_id).map(|i| i.product_id),
                score: r.score,
            })
            .collect(),
        trace: SearchTrace {
            routed: out
                .trace
                .routed
                .iter()
                .map(|&(tlc_id, probability)| RoutedTlc { tlc_id, probability })
                .collect(),
            no_partition: out.trace.no_partition,
            route_ns: t.route_ns,
            search_ns: t.search_ns,
            merge_ns: t.merge_ns,
            total_ns: t.total_ns,
        },
    }))
}

async fn healthz(State(st): State<Arc<AppState>>) -> Response {
    match st.current() {
        Some(s) => (StatusCode::OK, Json(json!({ "status": "serving", "build_version": s.version }))).into_response(),
        None => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "not_built", "no engine has been built yet")
            .into_response(),
    }
}

async fn stats(State(st): State<Arc<AppState>>) -> Json<Value> {
    let staged = st.staged.read().unwrap().as_ref().map(|d| d.summary.clone());
    let serving = st.current().map(|s| {
        json!({
            "build_version": s.version,
            "mode": s.mode,
            "index": s.index,
            "baseline_count": s.baseline.as_ref().map(|b| b.index().len()),
            "partitions": s.cascade.as_ref().map(|c| {
                c.partitions().iter().map(|(t, i)| (*t, i.len())).collect::<std::collections::BTreeMap<_, _>>()
            }),
        })
    });
    Json(json!({
        "uptime_s": st.started.elapsed().as_secs_f64(),
        "build_version": serving.as_ref().map(|s| s["build_version"].clone()),
        "building": st.building.load(Ordering::SeqCst),
        "searches": st.searches.load(Ordering::Relaxed),
        "staged": staged,
        "serving": serving,
    }))
}

pub fn app(state: Arc<AppState>) -> axum::Router {
    axum::Router::new()
        .route("/v1/ingest", post(ingest).layer(DefaultBodyLimit::max(MAX_INGEST_BYTES)))
        .route("/v1/build", post(build))
        .route("/v1/search", post(search))
        .route("/v1/healthz", get(healthz))
        .route("/v1/stats", get(stats))
        .with_state(state)
}

/// Stages `dir` if it holds a dataset; missing files are not an error.
fn preload(state: &AppState, dir: &Path) -> Result<()> {
    if dir.join(EMBEDDINGS_FILE).exists() && dir.join(CATALOG_FILE).exists() {
        let d = Dataset::load(dir)?;
        info!("staged dataset from {}", dir.display());
        state.stage(d);
    }
    Ok(())
}

/// A server running on its own runtime thread.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting connections and waits for the runtime to finish.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    let workers = std::thread::available_parallelism().map_or(2, |n| n.get()).max(2);
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(workers)
        .enable_all()
        .build()
        .map_err(|e| Error::io("<runtime>", e))
}

/// Binds `addr` (port 0 picks a free port) and serves in the background.
pub fn spawn(addr: SocketAddr, data_dir: Option<PathBuf>) -> Result<ServerHandle> {
    let state = Arc::new(AppState::new(data_dir.clone()));
    if let Some(d) = &data_dir {
        preload(&state, d)?;
    }
    let rt = runtime()?;
    let listener = rt
        .block_on(tokio::net::TcpListener::bind(addr))
        .map_err(|e| Error::io(addr.to_string(), e))?;
    let bound = listener.local_addr().map_err(|e| Error::io(addr.to_string(), e))?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        rt.block_on(async move {
            let shutdown = async {
                let _ = rx.await;
            };
            if let Err(e) = axum::serve(listener, app(state)).with_graceful_shutdown(shutdown).await {
                warn!("server stopped: {e}");
            }
        });
    });
    Ok(ServerHandle {
        addr: bound,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serves in the foreground until Ctrl-C.
pub fn serve_forever(addr: SocketAddr, data_dir: Option<PathBuf>) -> Result<()> {
    let handle = spawn(addr, data_dir)?;
    info!("listening on http://{}", handle.addr());
    println!("listening on http://{}", handle.addr());
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io("<runtime>", e))?;
    rt.block_on(async {
        let _ = tokio::signal::ctrl_c().await;
    });
    handle.shutdown();
    Ok(())
}
