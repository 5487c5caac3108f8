//! Curation HTTP service: serves kept candidates to annotators, records
//! their decisions in an append-only JSONL log, and exports the benchmark.
//!
//! All state is the fold of the log over the candidate corpus. Writes hold a
//! single mutex, append one line, fsync, then apply; reads serve from memory.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use m3cot_core::bench::{lint_dataset, BenchmarkItem, Category, FieldError};
use m3cot_core::chat::{media_type_for, ImageRef, ImageSource};
use m3cot_core::curation::{CurationError, CurationItem, CurationState, Decision, LogEntry, Planned, Progress};
use m3cot_core::forge::CandidateQA;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::dataset::{load_artifact, relative_to, to_jsonl, DatasetError};

pub const ANNOTATOR_HEADER: &str = "x-annotator";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Curation(#[from] CurationError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{0}")]
    Corpus(String),
    #[error("log {path}: line {line}: {message}")]
    Log { path: PathBuf, line: usize, message: String },
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

struct Inner {
    state: CurationState,
    log: File,
}

pub struct CurationService {
    inner: Mutex<Inner>,
    corpus: Vec<CandidateQA>,
    image_root: PathBuf,
    log_path: PathBuf,
    /// Candidates in the input that were not ready for curation.
    pub skipped: Vec<String>,
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Read a log, dropping a torn final line left by a crash mid-append.
pub fn read_log(path: &Path) -> Result<Vec<LogEntry>, ServiceError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    let mut good_len = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let complete = line.ends_with('\n');
        if line.trim().is_empty() {
            good_len += line.len();
            continue;
        }
        match serde_json::from_str::<LogEntry>(line) {
            Ok(e) if complete => {
                entries.push(e);
                good_len += line.len();
            }
            Ok(_) | Err(_) if !complete => {
                tracing::warn!(path = %path.display(), "dropping torn final log line");
                OpenOptions::new().write(true).open(path)?.set_len(good_len as u64)?;
                break;
            }
            Ok(_) => unreachable!(),
            Err(e) => {
                return Err(ServiceError::Log { path: path.to_path_buf(), line: i + 1, message: e.to_string() })
            }
        }
    }
    Ok(entries)
}

impl CurationService {
    /// Load a candidate artifact and replay the log at `log_path`.
    pub fn open(candidates: &Path, log_path: &Path) -> Result<Self, ServiceError> {
        let loaded = load_artifact::<CandidateQA>(candidates)?;
        Self::from_corpus(loaded.items, loaded.image_root, log_path)
    }

    pub fn from_corpus(candidates: Vec<CandidateQA>, image_root: PathBuf, log_path: &Path) -> Result<Self, ServiceError> {
        let (ready, not_ready): (Vec<_>, Vec<_>) = candidates.into_iter().partition(CandidateQA::ready_for_curation);
        let skipped = not_ready.into_iter().map(|c| c.qa_id).collect();
        let log = read_log(log_path)?;
        let state = CurationState::replay(ready.clone(), &log).map_err(|e| ServiceError::Corpus(e.to_string()))?;
        if let Some(dir) = log_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(log_path)?;
        Ok(Self {
            inner: Mutex::new(Inner { state, log: file }),
            corpus: ready,
            image_root,
            log_path: log_path.to_path_buf(),
            skipped,
        })
    }

    pub fn image_root(&self) -> &Path {
        &self.image_root
    }

    pub fn corpus(&self) -> &[CandidateQA] {
        &self.corpus
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    pub fn snapshot(&self) -> CurationState {
        self.inner.lock().unwrap().state.clone()
    }

    fn commit(inner: &mut Inner, entry: &LogEntry) -> Result<(), ServiceError> {
        let before = inner.state.get(&entry.qa_id)?.clone();
        let seq = inner.state.next_seq;
        inner.state.apply(entry)?;
        let mut line = serde_json::to_vec(entry).map_err(io::Error::other)?;
        line.push(b'\n');
        let written = inner.log.write_all(&line).and_then(|_| inner.log.sync_data());
        if let Err(e) = written {
            inner.state.items.insert(before.qa_id.clone(), before);
            inner.state.next_seq = seq;
            return Err(e.into());
        }
        Ok(())
    }

    fn run(&self, plan: impl FnOnce(&CurationState) -> Result<Planned, CurationError>, qa_id: &str) -> Result<CurationItem, ServiceError> {
        let mut inner = self.inner.lock().unwrap();
        if let Planned::Append(entry) = plan(&inner.state)? {
            Self::commit(&mut inner, &entry)?;
        }
        Ok(inner.state.get(qa_id)?.clone())
    }

    /// The annotator's current item, or the next queued one assigned to them.
    pub fn next_item(&self, annotator: &str, category: Option<Category>) -> Result<Option<CurationItem>, ServiceError> {
        let mut inner = self.inner.lock().unwrap();
        let qa_id = match inner.state.plan_next(annotator, category, &now()) {
            None => return Ok(None),
            Some(Ok(held)) => held,
            Some(Err(entry)) => {
                Self::commit(&mut inner, &entry)?;
                entry.qa_id
            }
        };
        Ok(Some(inner.state.get(&qa_id)?.clone()))
    }

    pub fn accept(&self, qa_id: &str, annotator: &str, decision: Decision) -> Result<CurationItem, ServiceError> {
        self.run(|s| s.plan_accept(qa_id, annotator, decision, &now()), qa_id)
    }

    pub fn reject(&self, qa_id: &str, annotator: &str, reason: &str) -> Result<CurationItem, ServiceError> {
        self.run(|s| s.plan_reject(qa_id, annotator, reason, &now()), qa_id)
    }

    pub fn reopen(&self, qa_id: &str, actor: &str) -> Result<CurationItem, ServiceError> {
        self.run(|s| s.plan_reopen(qa_id, actor, &now()), qa_id)
    }

    pub fn item(&self, qa_id: &str) -> Result<CurationItem, ServiceError> {
        Ok(self.inner.lock().unwrap().state.get(qa_id)?.clone())
    }

    pub fn progress(&self) -> Progress {
        self.inner.lock().unwrap().state.progress()
    }

    pub fn export(&self) -> Vec<BenchmarkItem> {
        self.inner.lock().unwrap().state.export()
    }

    /// Image reference for the API: the path under the image root.
    pub fn image_ref(&self, image: &ImageRef) -> Option<String> {
        (image.source == ImageSource::LocalPath).then(|| relative_to(&self.image_root, &image.value)).flatten()
    }

    /// Resolve an API image reference to a file under the image root.
    pub fn image_path(&self, reference: &str) -> Option<PathBuf> {
        let rel = Path::new(reference);
        if reference.is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(_))) {
            return None;
        }
        let path = self.image_root.join(rel);
        let root = fs::canonicalize(&self.image_root).ok()?;
        let real = fs::canonicalize(&path).ok()?;
        (real.starts_with(&root) && real.is_file()).then_some(real)
    }
}

#[derive(Serialize)]
struct ImageUrls {
    ego: Option<String>,
    exo: Option<String>,
}

#[derive(Serialize)]
struct ItemView {
    #[serde(flatten)]
    item: CurationItem,
    image_urls: ImageUrls,
}

fn view(svc: &CurationService, mut item: CurationItem) -> ItemView {
    let url = |img: &ImageRef| svc.image_ref(img).map(|r| format!("/api/images/{r}"));
    let image_urls = ImageUrls { ego: url(&item.candidate.ego_image), exo: url(&item.candidate.exo_image) };
    for img in [&mut item.candidate.ego_image, &mut item.candidate.exo_image] {
        if let Some(r) = svc.image_ref(img) {
            img.value = r;
        }
    }
    ItemView { item, image_urls }
}

struct ApiError(StatusCode, serde_json::Value);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

fn api_error(status: StatusCode, code: &str, message: impl ToString) -> ApiError {
    ApiError(status, json!({"error": code, "message": message.to_string()}))
}

fn field_json(fields: &[FieldError]) -> serde_json::Value {
    json!(fields.iter().map(|f| json!({"field": f.field, "message": f.message})).collect::<Vec<_>>())
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Curation(c) => match &c {
                CurationError::UnknownItem(_) => api_error(StatusCode::NOT_FOUND, "unknown_item", &c),
                CurationError::NotAssigned { .. } => api_error(StatusCode::CONFLICT, "not_assigned", &c),
                CurationError::InvalidTransition { .. } => api_error(StatusCode::CONFLICT, "invalid_transition", &c),
                CurationError::InvalidDecision(fields) => ApiError(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    json!({"error": "invalid_decision", "message": c.to_string(), "fields": field_json(fields)}),
                ),
                _ => api_error(StatusCode::INTERNAL_SERVER_ERROR, "internal", &c),
            },
            other => api_error(StatusCode::INTERNAL_SERVER_ERROR, "internal", other),
        }
    }
}

type Svc = Arc<CurationService>;

fn annotator(headers: &HeaderMap) -> Result<String, ApiError> {
    headers
        .get(ANNOTATOR_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .ok_or_else(|| api_error(StatusCode::BAD_REQUEST, "missing_annotator", "set the X-Annotator header"))
}

/// Run blocking service work (mutex + fsync) off the async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| api_error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e))?
}

#[derive(Deserialize)]
struct NextQuery {
    category: Option<String>,
}

async fn next_item(State(svc): State<Svc>, headers: HeaderMap, Query(q): Query<NextQuery>) -> Result<Response, ApiError> {
    let who = annotator(&headers)?;
    let category = match q.category.filter(|c| !c.is_empty()) {
        None => None,
        Some(c) => Some(serde_json::from_value::<Category>(json!(c)).map_err(|_| {
            api_error(
                StatusCode::BAD_REQUEST,
                "bad_category",
                format!("unknown category `{c}`; expected pose_action, object_attribute, numerical or spatial"),
            )
        })?),
    };
    blocking(move || match svc.next_item(&who, category)? {
        None => Ok(StatusCode::NO_CONTENT.into_response()),
        Some(item) => Ok(Json(view(&svc, item)).into_response()),
    })
    .await
}

async fn get_item(State(svc): State<Svc>, UrlPath(qa_id): UrlPath<String>) -> Result<Response, ApiError> {
    let item = svc.item(&qa_id)?;
    Ok(Json(view(&svc, item)).into_response())
}

async fn decide(
    State(svc): State<Svc>,
    UrlPath(qa_id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let who = annotator(&headers)?;
    let decision: Decision = serde_json::from_slice(&body)
        .map_err(|e| api_error(StatusCode::BAD_REQUEST, "bad_body", format!("decision body: {e}")))?;
    blocking(move || Ok(Json(view(&svc, svc.accept(&qa_id, &who, decision)?)).into_response())).await
}

#[derive(Deserialize)]
struct RejectBody {
    reason: String,
}

async fn reject(
    State(svc): State<Svc>,
    UrlPath(qa_id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Result<Response, ApiError> {
    let who = annotator(&headers)?;
    let r: RejectBody = serde_json::from_slice(&body)
        .map_err(|e| api_error(StatusCode::BAD_REQUEST, "bad_body", format!("reject body: {e}")))?;
    blocking(move || Ok(Json(view(&svc, svc.reject(&qa_id, &who, &r.reason)?)).into_response())).await
}

async fn reopen(State(svc): State<Svc>, UrlPath(qa_id): UrlPath<String>, headers: HeaderMap) -> Result<Response, ApiError> {
    let who = annotator(&headers)?;
    blocking(move || Ok(Json(view(&svc, svc.reopen(&qa_id, &who)?)).into_response())).await
}

async fn progress(State(svc): State<Svc>) -> Json<Progress> {
    Json(svc.progress())
}

fn export_items(svc: &CurationService) -> Vec<BenchmarkItem> {
    let mut items = svc.export();
    for item in &mut items {
        for img in [&mut item.ego_image, &mut item.exo_image] {
            if let Some(r) = svc.image_ref(img) {
                img.value = r;
            }
        }
    }
    items
}

async fn export(State(svc): State<Svc>) -> Response {
    ([(header::CONTENT_TYPE, "application/x-ndjson")], to_jsonl(&export_items(&svc))).into_response()
}

async fn export_lint(State(svc): State<Svc>) -> Json<serde_json::Value> {
    let items = svc.export();
    Json(json!({"items": items.len(), "warnings": lint_dataset(&items)}))
}

async fn image(State(svc): State<Svc>, UrlPath(reference): UrlPath<String>) -> Result<Response, ApiError> {
    let path = svc
        .image_path(&reference)
        .ok_or_else(|| api_error(StatusCode::NOT_FOUND, "unknown_image", format!("no image `{reference}`")))?;
    let bytes = tokio::fs::read(&path).await.map_err(|e| api_error(StatusCode::NOT_FOUND, "unknown_image", e))?;
    Ok(([(header::CONTENT_TYPE, media_type_for(&reference))], bytes).into_response())
}

pub fn router(svc: Svc) -> Router {
    Router::new()
        .route("/api/items/next", get(next_item))
        .route("/api/items/:qa_id", get(get_item))
        .route("/api/items/:qa_id/decision", post(decide))
        .route("/api/items/:qa_id/reject", post(reject))
        .route("/api/items/:qa_id/reopen", post(reopen))
        .route("/api/progress", get(progress))
        .route("/api/export", get(export))
        .route("/api/export/lint", get(export_lint))
        .route("/api/images/*reference", get(image))
        .with_state(svc)
}

/// A server on its own runtime thread; stops when dropped.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
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

/// Bind `addr` and serve in the background.
pub fn spawn(svc: Svc, addr: SocketAddr) -> io::Result<ServerHandle> {
    let runtime = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
    let listener = runtime.block_on(tokio::net::TcpListener::bind(addr))?;
    let addr = listener.local_addr()?;
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        runtime.block_on(async move {
            let _ = axum::serve(listener, router(svc))
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(ServerHandle { addr, shutdown: Some(tx), thread: Some(thread) })
}

/// Serve in the foreground until Ctrl-C.
pub fn serve_forever(svc: Svc, addr: SocketAddr) -> io::Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        tracing::info!(addr = %listener.local_addr()?, "curation service listening");
        axum::serve(listener, router(svc))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn torn_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("log.jsonl");
        let e = LogEntry {
            seq: 1,
            qa_id: "a".into(),
            action: m3cot_core::curation::Action::Assign,
            payload: json!({}),
            actor: "ann".into(),
            at: "t".into(),
        };
        let line = serde_json::to_string(&e).unwrap();
        fs::write(&p, format!("{line}\n{}", &line[..10])).unwrap();
        assert_eq!(read_log(&p).unwrap(), vec![e]);
        assert_eq!(fs::read_to_string(&p).unwrap(), format!("{line}\n"));
        fs::write(&p, "garbage\n").unwrap();
        assert!(matches!(read_log(&p), Err(ServiceError::Log { line: 1, .. })));
    }
}
