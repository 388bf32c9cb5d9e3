use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use kgenv_core::dataset::{DatasetLoader, QaRow};
use kgenv_core::graph::KnowledgeGraph;
use kgenv_core::retrieval::{execute, ExecOptions, FormatMode, KgError, Observation, DEFAULT_RESULT_CAP};
use kgenv_core::QASample;
use thiserror::Error;
use tokio::sync::oneshot;

use crate::wire::{Health, RetrieveRequest, RetrieveResponse, SampleInfo, SwapAck, SHARED_SAMPLE};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerConfig {
    /// Used when a request names no format.
    pub format: FormatMode,
    pub result_cap: usize,
    pub timeout: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { format: FormatMode::Flat, result_cap: DEFAULT_RESULT_CAP, timeout: DEFAULT_TIMEOUT }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("duplicate sample_id {0:?}")]
    DuplicateId(String),
    #[error("sample_id {0:?} is reserved for the shared graph")]
    ReservedId(String),
    #[error("empty sample_id")]
    EmptyId,
    #[error("row {line} ({sample_id}): {reason}")]
    Rejected { line: usize, sample_id: String, reason: String },
}

#[derive(Debug, Clone)]
struct Entry {
    anchors: Vec<String>,
    graph: Arc<KnowledgeGraph>,
}

/// The graphs a running service answers from. Gold answers are dropped on
/// construction, so nothing the service holds can leak them.
#[derive(Debug, Clone, Default)]
pub struct Backend {
    samples: BTreeMap<String, Entry>,
    shared: Option<Arc<KnowledgeGraph>>,
}

impl Backend {
    pub fn new(samples: &[QASample], shared: Option<Arc<KnowledgeGraph>>) -> Result<Self, BackendError> {
        let mut map = BTreeMap::new();
        for s in samples {
            if s.sample_id.is_empty() {
                return Err(BackendError::EmptyId);
            }
            if s.sample_id == SHARED_SAMPLE {
                return Err(BackendError::ReservedId(s.sample_id.clone()));
            }
            let entry = Entry { anchors: s.anchor_entities.clone(), graph: Arc::clone(&s.graph) };
            if map.insert(s.sample_id.clone(), entry).is_some() {
                return Err(BackendError::DuplicateId(s.sample_id.clone()));
            }
        }
        Ok(Self { samples: map, shared })
    }

    /// Builds a backend from wire rows. Rows must carry inline triples; graph
    /// file references are refused so remote callers cannot read local files.
    pub fn from_rows(rows: Vec<QaRow>) -> Result<Self, BackendError> {
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.graph.is_some()) {
            return Err(BackendError::Rejected {
                line: i + 1,
                sample_id: r.sample_id.clone(),
                reason: "graph references are not accepted here; send inline triples".into(),
            });
        }
        let load = DatasetLoader::new().load_rows(rows);
        if let Some(r) = load.rejected.into_iter().next() {
            return Err(BackendError::Rejected { line: r.line, sample_id: r.sample_id.unwrap_or_default(), reason: r.reason });
        }
        Self::new(&load.samples, None)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn graph(&self, sample_id: &str) -> Option<&Arc<KnowledgeGraph>> {
        if sample_id == SHARED_SAMPLE {
            return self.shared.as_ref();
        }
        self.samples.get(sample_id).map(|e| &e.graph)
    }

    /// What the engine returns for this request.
    pub fn execute(&self, req: &RetrieveRequest, opts: ExecOptions) -> Observation {
        match self.graph(&req.sample_id) {
            Some(g) => execute(g, &req.call(), opts),
            None => Observation::from_error(KgError::sample_not_found(&req.sample_id)),
        }
    }

    fn distinct_graphs(&self) -> Vec<&Arc<KnowledgeGraph>> {
        let mut seen = BTreeSet::new();
        self.shared
            .iter()
            .chain(self.samples.values().map(|e| &e.graph))
            .filter(|g| seen.insert(Arc::as_ptr(g)))
            .collect()
    }
}

struct AppState {
    backend: RwLock<Arc<Backend>>,
    generation: AtomicU64,
    config: ServerConfig,
    started: Instant,
}

impl AppState {
    fn snapshot(&self) -> Arc<Backend> {
        Arc::clone(&self.backend.read().unwrap_or_else(|e| e.into_inner()))
    }

    fn swap(&self, backend: Backend) -> u64 {
        let mut slot = self.backend.write().unwrap_or_else(|e| e.into_inner());
        *slot = Arc::new(backend);
        self.generation.fetch_add(1, Ordering::SeqCst) + 1
    }
}

type Shared = Arc<AppState>;

pub fn router(backend: Backend, config: ServerConfig) -> (Router, SwapHandle) {
    let state = Arc::new(AppState {
        backend: RwLock::new(Arc::new(backend)),
        generation: AtomicU64::new(0),
        config,
        started: Instant::now(),
    });
    let router = Router::new()
        .route("/retrieve", post(retrieve))
        .route("/retrieve/batch", post(retrieve_batch))
        .route("/health", get(health))
        .route("/samples/:id", get(sample_info))
        .route("/admin/swap", post(swap))
        .with_state(Arc::clone(&state));
    (router, SwapHandle(state))
}

/// Replaces the backend of a running service.
#[derive(Clone)]
pub struct SwapHandle(Shared);

impl SwapHandle {
    /// Requests already dispatched finish against the previous backend.
    pub fn swap_backend(&self, backend: Backend) -> u64 {
        self.0.swap(backend)
    }
}

fn bad_request(reason: &str) -> Response {
    (StatusCode::BAD_REQUEST, Json(RetrieveResponse::malformed(reason))).into_response()
}

fn decode(value: serde_json::Value) -> Result<RetrieveRequest, String> {
    let req: RetrieveRequest = serde_json::from_value(value).map_err(|e| e.to_string())?;
    if req.sample_id.is_empty() {
        return Err("sample_id must be non-empty".into());
    }
    Ok(req)
}

async fn run_one(state: &AppState, req: RetrieveRequest) -> RetrieveResponse {
    let start = Instant::now();
    let backend = state.snapshot();
    let opts = ExecOptions { format: req.format_mode.unwrap_or(state.config.format), result_cap: state.config.result_cap };
    let task = tokio::task::spawn_blocking(move || backend.execute(&req, opts));
    let obs = match tokio::time::timeout(state.config.timeout, task).await {
        Ok(Ok(obs)) => obs,
        Ok(Err(e)) => {
            log::error!("retrieval task failed: {e}");
            let mut r = RetrieveResponse::malformed("internal error");
            r.rendered_text = "Internal server error".into();
            r.error_code = Some("KG_SERVER_ERROR".into());
            return r;
        }
        Err(_) => Observation::from_error(KgError::timeout(state.config.timeout.as_millis() as u64)),
    };
    RetrieveResponse::from_observation(&obs, start.elapsed().as_micros() as u64)
}

async fn retrieve(State(state): State<Shared>, body: Bytes) -> Response {
    let value: serde_json::Value = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return bad_request(&e.to_string()),
    };
    match decode(value) {
        Ok(req) => Json(run_one(&state, req).await).into_response(),
        Err(e) => bad_request(&e),
    }
}

async fn retrieve_batch(State(state): State<Shared>, body: Bytes) -> Response {
    let items: Vec<serde_json::Value> = match serde_json::from_slice(&body) {
        Ok(v) => v,
        Err(e) => return bad_request(&format!("batch body must be a JSON array: {e}")),
    };
    let mut out = Vec::with_capacity(items.len());
    for item in items {
        out.push(match decode(item) {
            Ok(req) => run_one(&state, req).await,
            Err(e) => RetrieveResponse::malformed(&e),
        });
    }
    Json(out).into_response()
}

async fn health(State(state): State<Shared>) -> Json<Health> {
    let backend = state.snapshot();
    let graphs = backend.distinct_graphs();
    Json(Health {
        status: "ok".into(),
        samples: backend.len(),
        shared_graph: backend.shared.is_some(),
        entities: graphs.iter().map(|g| g.entities().len()).sum(),
        relations: graphs.iter().map(|g| g.relations().len()).sum(),
        triples: graphs.iter().map(|g| g.len()).sum(),
        uptime_s: state.started.elapsed().as_secs(),
        generation: state.generation.load(Ordering::SeqCst),
    })
}

async fn sample_info(State(state): State<Shared>, Path(id): Path<String>) -> Response {
    let backend = state.snapshot();
    let info = |anchors: Vec<String>, g: &KnowledgeGraph| SampleInfo {
        sample_id: id.clone(),
        anchor_entities: anchors,
        entities: g.entities().len(),
        relations: g.relations().len(),
        triples: g.len(),
    };
    let found = match (id.as_str(), backend.samples.get(&id)) {
        (_, Some(e)) => Some(info(e.anchors.clone(), &e.graph)),
        (SHARED_SAMPLE, None) => backend.shared.as_deref().map(|g| info(Vec::new(), g)),
        _ => None,
    };
    match found {
        Some(i) => Json(i).into_response(),
        None => {
            let obs = Observation::from_error(KgError::sample_not_found(&id));
            (StatusCode::NOT_FOUND, Json(RetrieveResponse::from_observation(&obs, 0))).into_response()
        }
    }
}

async fn swap(State(state): State<Shared>, body: Bytes) -> Response {
    let rows: Vec<QaRow> = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return bad_request(&format!("swap body must be a JSON array of dataset rows: {e}")),
    };
    match Backend::from_rows(rows) {
        Ok(b) => {
            let samples = b.len();
            let generation = state.swap(b);
            log::info!("backend swapped: {samples} samples, generation {generation}");
            Json(SwapAck { samples, generation }).into_response()
        }
        Err(e) => (StatusCode::UNPROCESSABLE_ENTITY, Json(RetrieveResponse::malformed(&e.to_string()))).into_response(),
    }
}

/// A service running on its own runtime thread.
pub struct ServerHandle {
    addr: SocketAddr,
    swap: SwapHandle,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    /// Binds `bind` (port 0 picks a free port) and starts serving.
    pub fn spawn(backend: Backend, config: ServerConfig, bind: &str) -> std::io::Result<Self> {
        let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        let listener = runtime.block_on(tokio::net::TcpListener::bind(bind))?;
        let addr = listener.local_addr()?;
        let (app, swap) = router(backend, config);
        let (tx, rx) = oneshot::channel::<()>();
        let thread = std::thread::Builder::new().name("kg-service".into()).spawn(move || {
            runtime.block_on(async move {
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
            })
        })?;
        log::info!("kg service listening on {addr}");
        Ok(Self { addr, swap, shutdown: Some(tx), thread: Some(thread) })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn swap_backend(&self, backend: Backend) -> u64 {
        self.swap.swap_backend(backend)
    }

    /// Blocks until the server stops.
    pub fn wait(mut self) -> std::io::Result<()> {
        match self.thread.take() {
            Some(t) => t.join().unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }

    pub fn shutdown(mut self) -> std::io::Result<()> {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        self.wait()
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
