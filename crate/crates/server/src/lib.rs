//! HTTP service for live annotation: serves the codebook, hands out image
//! tasks per annotator, accepts annotation records and reports progress and
//! agreement over the current store.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::RwLock;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;
use viralscope::agreement::{agreement_table, AgreementError};
use viralscope::codebook::{load_codebook, AnnotationRecord, Codebook, CodebookError};
use viralscope::store::{AnnotationStore, ImageTask, StoreError};

pub const DEFAULT_BODY_LIMIT: usize = 256 * 1024;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("codebook: {0}")]
    Codebook(#[from] CodebookError),
    #[error("annotation store: {0}")]
    Store(#[from] StoreError),
    #[error("task list {path}: {reason}")]
    Tasks { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

/// Where the service finds its inputs.
#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub data_dir: PathBuf,
    /// Codebook document; the built-in codebook when absent.
    pub codebook: Option<PathBuf>,
    /// Task list, relative paths resolved against `data_dir`.
    pub tasks: PathBuf,
    pub annotations: PathBuf,
    /// Seed for the per-annotator task order.
    pub seed: u64,
}

impl ServerConfig {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        ServerConfig {
            data_dir: data_dir.into(),
            codebook: None,
            tasks: PathBuf::from("tasks.json"),
            annotations: PathBuf::from("annotations.jsonl"),
            seed: 0,
        }
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.data_dir.join(p)
        }
    }
}

/// Accepts either a bare task array or an object with a `tasks` field
/// (the ingest artifact).
pub fn parse_tasks(text: &str) -> Result<Vec<ImageTask>, serde_json::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Doc {
        Bare(Vec<ImageTask>),
        Wrapped { tasks: Vec<ImageTask> },
    }
    Ok(match serde_json::from_str(text)? {
        Doc::Bare(t) | Doc::Wrapped { tasks: t } => t,
    })
}

/// Everything a ready server holds.
#[derive(Debug)]
pub struct Workspace {
    codebook_json: String,
    store: AnnotationStore,
    tasks: Vec<ImageTask>,
    by_id: HashMap<String, usize>,
    image_root: PathBuf,
    seed: u64,
}

impl Workspace {
    pub fn new(store: AnnotationStore, tasks: Vec<ImageTask>, image_root: impl Into<PathBuf>, seed: u64) -> Self {
        let by_id = tasks.iter().enumerate().map(|(i, t)| (t.image_id.clone(), i)).collect();
        Workspace {
            codebook_json: store.codebook().to_json(),
            store,
            tasks,
            by_id,
            image_root: image_root.into(),
            seed,
        }
    }

    pub fn load(cfg: &ServerConfig) -> Result<Self, ServerError> {
        let read = |p: &Path| fs::read_to_string(p).map_err(|source| ServerError::Io { path: p.to_path_buf(), source });
        let codebook = match &cfg.codebook {
            Some(p) => load_codebook(&read(&cfg.resolve(p))?)?,
            None => Codebook::canonical(),
        };
        let tasks_path = cfg.resolve(&cfg.tasks);
        let tasks = parse_tasks(&read(&tasks_path)?).map_err(|e| ServerError::Tasks {
            path: tasks_path.clone(),
            reason: e.to_string(),
        })?;
        let store = AnnotationStore::open(codebook, cfg.resolve(&cfg.annotations))?;
        Ok(Workspace::new(store, tasks, cfg.data_dir.clone(), cfg.seed))
    }

    pub fn store(&self) -> &AnnotationStore {
        &self.store
    }

    pub fn tasks(&self) -> &[ImageTask] {
        &self.tasks
    }

    /// Task indices in the order one annotator sees them.
    pub fn task_order(&self, annotator: &str) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.tasks.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(annotator)));
        order
    }

    fn completed(&self, annotator: &str) -> usize {
        self.tasks.iter().filter(|t| self.store.get(&t.image_id, annotator).is_some()).count()
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Debug)]
enum Phase {
    Starting,
    Failed(String),
    Ready(Box<Workspace>),
}

/// Shared server state; starts empty so requests during loading get 503.
#[derive(Clone)]
pub struct AppState {
    phase: Arc<RwLock<Phase>>,
}

impl AppState {
    pub fn starting() -> Self {
        AppState { phase: Arc::new(RwLock::new(Phase::Starting)) }
    }

    pub fn ready(ws: Workspace) -> Self {
        let s = Self::starting();
        s.install(ws);
        s
    }

    pub fn install(&self, ws: Workspace) {
        *self.phase.write() = Phase::Ready(Box::new(ws));
    }

    pub fn fail(&self, reason: impl Into<String>) {
        *self.phase.write() = Phase::Failed(reason.into());
    }

    pub fn load(&self, cfg: &ServerConfig) -> Result<(), ServerError> {
        match Workspace::load(cfg) {
            Ok(ws) => {
                self.install(ws);
                Ok(())
            }
            Err(e) => {
                self.fail(e.to_string());
                Err(e)
            }
        }
    }

    fn read<T>(&self, f: impl FnOnce(&Workspace) -> Result<T, ApiError>) -> Result<T, ApiError> {
        match &*self.phase.read() {
            Phase::Ready(ws) => f(ws),
            other => Err(not_ready(other)),
        }
    }

    fn write<T>(&self, f: impl FnOnce(&mut Workspace) -> Result<T, ApiError>) -> Result<T, ApiError> {
        match &mut *self.phase.write() {
            Phase::Ready(ws) => f(ws),
            other => Err(not_ready(other)),
        }
    }
}

fn not_ready(phase: &Phase) -> ApiError {
    match phase {
        Phase::Failed(reason) => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("server failed to start: {reason}")),
        _ => ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "server is still loading"),
    }
}

#[derive(Debug)]
struct ApiError {
    status: StatusCode,
    body: serde_json::Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, body: json!({ "error": message.into() }) }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub image_id: String,
    pub image_url: String,
    /// 1-based position of this task in the annotator's sequence.
    pub position: usize,
    /// Tasks not yet completed, this one included.
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatorProgress {
    pub annotator_id: String,
    pub completed: usize,
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub n_tasks: usize,
    pub live_records: usize,
    pub annotators: Vec<AnnotatorProgress>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskOrder {
    pub annotator_id: String,
    pub image_ids: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct AnnotatorQuery {
    annotator: Option<String>,
}

fn annotator(q: &AnnotatorQuery) -> Result<&str, ApiError> {
    match q.annotator.as_deref().map(str::trim) {
        Some(a) if !a.is_empty() => Ok(a),
        _ => Err(ApiError::new(StatusCode::BAD_REQUEST, "missing `annotator` query parameter")),
    }
}

/// Builds the service. `static_dir`, when given, is served for every path
/// outside `/api`.
pub fn router(state: AppState, static_dir: Option<&Path>, body_limit: usize) -> Router {
    let api = Router::new()
        .route("/api/codebook", get(get_codebook))
        .route("/api/tasks", get(get_task_order))
        .route("/api/tasks/next", get(next_task))
        .route("/api/annotations", post(post_annotation))
        .route("/api/agreement", get(get_agreement))
        .route("/api/progress", get(get_progress))
        .route("/api/images/{id}", get(get_image))
        .layer(DefaultBodyLimit::max(body_limit))
        .layer(CorsLayer::permissive())
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Binds and serves until the task is cancelled.
pub async fn serve(addr: SocketAddr, app: Router) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app).await
}

async fn get_codebook(State(state): State<AppState>) -> Result<Response, ApiError> {
    let body = state.read(|ws| Ok(ws.codebook_json.clone()))?;
    Ok(([(header::CONTENT_TYPE, "application/json")], body).into_response())
}

async fn get_task_order(State(state): State<AppState>, Query(q): Query<AnnotatorQuery>) -> Result<Json<TaskOrder>, ApiError> {
    let a = annotator(&q)?;
    state.read(|ws| {
        Ok(Json(TaskOrder {
            annotator_id: a.to_string(),
            image_ids: ws.task_order(a).into_iter().map(|i| ws.tasks[i].image_id.clone()).collect(),
        }))
    })
}

async fn next_task(State(state): State<AppState>, Query(q): Query<AnnotatorQuery>) -> Result<Response, ApiError> {
    let a = annotator(&q)?;
    state.read(|ws| {
        let completed = ws.completed(a);
        let next = ws
            .task_order(a)
            .into_iter()
            .map(|i| &ws.tasks[i])
            .find(|t| ws.store.get(&t.image_id, a).is_none());
        Ok(match next {
            None => StatusCode::NO_CONTENT.into_response(),
            Some(t) => Json(TaskDescriptor {
                image_id: t.image_id.clone(),
                image_url: format!("/api/images/{}", t.image_id),
                position: completed + 1,
                remaining: ws.tasks.len() - completed,
            })
            .into_response(),
        })
    })
}

async fn post_annotation(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let rec: AnnotationRecord = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed annotation record: {e}")))?;
    state.write(|ws| {
        if !ws.tasks.is_empty() && !ws.by_id.contains_key(&rec.image_id) {
            return Err(ApiError::new(StatusCode::NOT_FOUND, format!("unknown image `{}`", rec.image_id)));
        }
        // Identical resubmissions are acknowledged without a new log line.
        if let Some(prev) = ws.store.get(&rec.image_id, &rec.annotator_id) {
            if prev.record == rec {
                return Ok((StatusCode::CREATED, Json(json!({ "seq": prev.seq }))).into_response());
            }
        }
        match ws.store.append_record(rec) {
            Ok(seq) => Ok((StatusCode::CREATED, Json(json!({ "seq": seq }))).into_response()),
            Err(StoreError::ValidationFailed(violations)) => Err(ApiError {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                body: json!({ "error": "record failed validation", "violations": violations }),
            }),
            Err(e @ StoreError::StorageFull(_)) => Err(ApiError::new(StatusCode::INSUFFICIENT_STORAGE, e.to_string())),
            Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
        }
    })
}

async fn get_agreement(State(state): State<AppState>) -> Result<Response, ApiError> {
    state.read(|ws| match agreement_table(ws.store.records(), ws.store.codebook()) {
        Ok(report) => Ok(Json(report).into_response()),
        Err(e @ AgreementError::InsufficientRaters(_)) => Err(ApiError::new(StatusCode::CONFLICT, e.to_string())),
        Err(e) => Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())),
    })
}

async fn get_progress(State(state): State<AppState>, Query(q): Query<AnnotatorQuery>) -> Result<Json<Progress>, ApiError> {
    state.read(|ws| {
        let mut ids: BTreeSet<String> = ws.store.annotators().into_iter().collect();
        ids.extend(ws.tasks.iter().flat_map(|t| t.assigned_annotators.iter().cloned()));
        if let Ok(a) = annotator(&q) {
            ids.insert(a.to_string());
        }
        let annotators = ids
            .into_iter()
            .map(|a| {
                let completed = ws.completed(&a);
                AnnotatorProgress { remaining: ws.tasks.len() - completed, completed, annotator_id: a }
            })
            .collect();
        Ok(Json(Progress { n_tasks: ws.tasks.len(), live_records: ws.store.live_count(), annotators }))
    })
}

fn content_type(path: &Path) -> &'static str {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        Some("gif") => "image/gif",
        Some("webp") => "image/webp",
        Some("bmp") => "image/bmp",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn get_image(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Result<Response, ApiError> {
    let path = state.read(|ws| {
        let t = ws
            .by_id
            .get(&id)
            .map(|&i| &ws.tasks[i])
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown image `{id}`")))?;
        Ok(if t.image_path.is_absolute() { t.image_path.clone() } else { ws.image_root.join(&t.image_path) })
    })?;
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::new(StatusCode::NOT_FOUND, format!("{}: {e}", path.display())))?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
}
