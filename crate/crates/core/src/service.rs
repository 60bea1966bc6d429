//! HTTP front end: model store, renders, and queued edit jobs.
//!
//! Models are content-addressed by the SHA-256 of their canonical `.brj`
//! text. Edits run as background jobs on a bounded worker pool; clients poll
//! `/jobs/{id}`.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{oneshot, Semaphore};

use crate::annotate::{localize, Backend, RemoteClient};
use crate::brep::{parse_brep, serialize_brep, tessellate, BRepModel, Vec3};
use crate::error::{Error, Result};
use crate::metrics::{is_success, match_primitives, MatchScores, MATCH_THRESHOLD};
use crate::modifier::{edit, EditOptions, ModifierParams};
use crate::render::{render_model, Viewpoint};
use crate::synth::{sha256_hex, Dataset, Direction, EditRecord};
use crate::validity::ValidityReport;

/// Content address of a model.
pub fn model_id(model: &BRepModel) -> String {
    sha256_hex(serialize_brep(model).as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResult {
    pub model_id: String,
    pub face_count: usize,
    pub bbox: [f64; 4],
    pub instruct_prompt: String,
    pub validity: ValidityReport,
    /// Scores against the record's other model when the source came from a record.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<EditMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditMetrics {
    pub scores: MatchScores,
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobState {
    pub status: JobStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<EditResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalizerKind {
    Oracle,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub model_id: String,
    /// Camera direction; oracle edits default to the record's own view.
    #[serde(default)]
    pub view_dir: Option<[f64; 3]>,
    pub prompt: String,
    pub localizer: LocalizerKind,
}

/// Shared state behind the router.
pub struct ServiceState {
    models: RwLock<BTreeMap<String, BRepModel>>,
    records: Vec<EditRecord>,
    /// Model id -> (record index, direction) for oracle localization.
    contexts: HashMap<String, (usize, Direction)>,
    jobs: Mutex<BTreeMap<String, JobState>>,
    next_job: AtomicU64,
    params: Option<Arc<ModifierParams>>,
    remote: Option<RemoteClient>,
    workers: Arc<Semaphore>,
}

impl ServiceState {
    pub fn new(params: Option<ModifierParams>, remote: Option<RemoteClient>, workers: usize) -> Self {
        Self {
            models: RwLock::new(BTreeMap::new()),
            records: Vec::new(),
            contexts: HashMap::new(),
            jobs: Mutex::new(BTreeMap::new()),
            next_job: AtomicU64::new(1),
            params: params.map(Arc::new),
            remote,
            workers: Arc::new(Semaphore::new(workers.max(1))),
        }
    }

    pub fn add_model(&self, model: BRepModel) -> String {
        let id = model_id(&model);
        self.models.write().expect("model lock").insert(id.clone(), model);
        id
    }

    /// Registers both models of every record, remembering them as oracle context.
    pub fn add_records(&mut self, records: impl IntoIterator<Item = EditRecord>) {
        for r in records {
            let idx = self.records.len();
            let before = self.add_model(r.model_before.clone());
            let after = self.add_model(r.model_after.clone());
            self.contexts.entry(before).or_insert((idx, Direction::Delete));
            self.contexts.entry(after).or_insert((idx, Direction::Add));
            self.records.push(r);
        }
    }

    pub fn add_dataset(&mut self, dataset: &Dataset) {
        self.add_records(dataset.records.iter().cloned());
    }

    pub fn model(&self, id: &str) -> Option<BRepModel> {
        self.models.read().expect("model lock").get(id).cloned()
    }

    pub fn job(&self, id: &str) -> Option<JobState> {
        self.jobs.lock().expect("job lock").get(id).cloned()
    }

    fn set_job(&self, id: &str, state: JobState) {
        self.jobs.lock().expect("job lock").insert(id.to_owned(), state);
    }

    fn run_edit(&self, req: &EditRequest) -> Result<EditResult> {
        let params = self.params.as_deref().ok_or_else(|| Error::Config("no checkpoint loaded".into()))?;
        let model = self.model(&req.model_id).ok_or_else(|| Error::Reference(format!("model {}", req.model_id)))?;
        let context = self.contexts.get(&req.model_id).map(|&(i, d)| (&self.records[i], d));
        let view = match (req.view_dir, req.localizer, context) {
            (Some(d), _, _) => Viewpoint::from_direction(Vec3::from(d), 0)?,
            (None, LocalizerKind::Oracle, Some((r, _))) => r.view,
            (None, _, _) => Viewpoint::from_direction(Vec3::new(1.0, 1.0, 1.0), 0)?,
        };
        let image = render_model(&model, &view);
        let backend = match req.localizer {
            LocalizerKind::Oracle => Backend::Oracle(context),
            LocalizerKind::Remote => Backend::Remote(
                self.remote
                    .as_ref()
                    .ok_or_else(|| Error::Config("no remote localizer configured".into()))?,
            ),
        };
        let loc = localize(&image, &req.prompt, backend)?;
        let out = edit(&model, &view, &loc.bbox, &loc.instruct_prompt, params, &EditOptions::default())?;
        let metrics = context.map(|(r, d)| {
            let gt = r.oriented(d).1;
            EditMetrics {
                scores: match_primitives(&out.model, gt, MATCH_THRESHOLD),
                success: is_success(&out.model, gt),
            }
        });
        let face_count = out.model.face_count();
        let model_id = self.add_model(out.model);
        Ok(EditResult {
            model_id,
            face_count,
            bbox: loc.bbox.to_array(),
            instruct_prompt: loc.instruct_prompt,
            validity: out.report,
            metrics,
        })
    }
}

type Shared = Arc<ServiceState>;

fn err(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn list_models(State(s): State<Shared>) -> Json<Value> {
    let models = s.models.read().expect("model lock");
    Json(Value::Array(
        models
            .iter()
            .map(|(id, m)| json!({ "id": id, "face_count": m.face_count() }))
            .collect(),
    ))
}

async fn upload_model(State(s): State<Shared>, body: String) -> Response {
    match parse_brep(&body) {
        Ok(m) => {
            let face_count = m.face_count();
            let id = s.add_model(m);
            (StatusCode::CREATED, Json(json!({ "id": id, "face_count": face_count }))).into_response()
        }
        Err(e) => err(StatusCode::BAD_REQUEST, e.to_string()),
    }
}

async fn get_model(State(s): State<Shared>, Path(id): Path<String>) -> Response {
    match s.model(&id) {
        Some(m) => ([(header::CONTENT_TYPE, "text/plain")], serialize_brep(&m)).into_response(),
        None => err(StatusCode::NOT_FOUND, format!("unknown model {id}")),
    }
}

async fn get_mesh(State(s): State<Shared>, Path(id): Path<String>) -> Response {
    match s.model(&id) {
        Some(m) => Json(tessellate(&m)).into_response(),
        None => err(StatusCode::NOT_FOUND, format!("unknown model {id}")),
    }
}

#[derive(Deserialize)]
struct RenderQuery {
    dir: Option<String>,
}

fn parse_dir(text: &str) -> Option<Vec3> {
    let v: Vec<f64> = text.split(',').map(|t| t.trim().parse().ok()).collect::<Option<_>>()?;
    (v.len() == 3).then(|| Vec3::new(v[0], v[1], v[2]))
}

async fn render(State(s): State<Shared>, Path(id): Path<String>, Query(q): Query<RenderQuery>) -> Response {
    let Some(m) = s.model(&id) else {
        return err(StatusCode::NOT_FOUND, format!("unknown model {id}"));
    };
    let dir = match q.dir.as_deref().map(parse_dir) {
        None => Vec3::new(1.0, 1.0, 1.0),
        Some(Some(d)) => d,
        Some(None) => return err(StatusCode::BAD_REQUEST, "dir must be x,y,z"),
    };
    match Viewpoint::from_direction(dir, 0) {
        Ok(view) => {
            let pgm = tokio::task::spawn_blocking(move || render_model(&m, &view).to_pgm()).await;
            match pgm {
                Ok(bytes) => ([(header::CONTENT_TYPE, "image/x-portable-graymap")], Bytes::from(bytes)).into_response(),
                Err(e) => err(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
            }
        }
        Err(e) => err(StatusCode::BAD_REQUEST, e.to_string()),
    }
}

async fn submit_edit(State(s): State<Shared>, body: Bytes) -> Response {
    let req: EditRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return err(StatusCode::BAD_REQUEST, e.to_string()),
    };
    if s.model(&req.model_id).is_none() {
        return err(StatusCode::NOT_FOUND, format!("unknown model {}", req.model_id));
    }
    let job_id = format!("job-{:06}", s.next_job.fetch_add(1, Ordering::SeqCst));
    s.set_job(
        &job_id,
        JobState {
            status: JobStatus::Queued,
            result: None,
            error: None,
        },
    );
    let state = s.clone();
    let id = job_id.clone();
    tokio::spawn(async move {
        let Ok(_permit) = state.workers.clone().acquire_owned().await else { return };
        state.set_job(
            &id,
            JobState {
                status: JobStatus::Running,
                result: None,
                error: None,
            },
        );
        let worker = state.clone();
        let outcome = tokio::task::spawn_blocking(move || worker.run_edit(&req)).await;
        let final_state = match outcome {
            Ok(Ok(result)) => JobState {
                status: JobStatus::Done,
                result: Some(result),
                error: None,
            },
            Ok(Err(e)) => JobState {
                status: JobStatus::Failed,
                result: None,
                error: Some(e.to_string()),
            },
            Err(e) => JobState {
                status: JobStatus::Failed,
                result: None,
                error: Some(format!("worker panicked: {e}")),
            },
        };
        state.set_job(&id, final_state);
    });
    (StatusCode::ACCEPTED, Json(json!({ "job_id": job_id }))).into_response()
}

async fn get_job(State(s): State<Shared>, Path(id): Path<String>) -> Response {
    match s.job(&id) {
        Some(j) => Json(j).into_response(),
        None => err(StatusCode::NOT_FOUND, format!("unknown job {id}")),
    }
}

/// Worker count used when none is configured.
pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/models", get(list_models).post(upload_model))
        .route("/models/{id}", get(get_model))
        .route("/models/{id}/mesh", get(get_mesh))
        .route("/models/{id}/render", get(render))
        .route("/edit", post(submit_edit))
        .route("/jobs/{id}", get(get_job))
        .fallback(|| async { err(StatusCode::NOT_FOUND, "no such route") })
        .with_state(state)
}

/// Serves on `addr` until the process exits.
pub fn serve_blocking(addr: &str, state: ServiceState) -> Result<()> {
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Transport(e.to_string()))?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await?;
        axum::serve(listener, router(Arc::new(state))).await?;
        Ok(())
    })
}

/// Service on a background thread; shuts down on drop. Used by tests and the CLI.
pub struct RunningService {
    addr: SocketAddr,
    state: Shared,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl RunningService {
    pub fn start(addr: &str, state: ServiceState) -> Result<Self> {
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let state = Arc::new(state);
        let app = router(state.clone());
        let (tx, rx) = oneshot::channel::<()>();
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).expect("tokio listener");
                let _ = axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await;
            });
        });
        Ok(Self {
            addr,
            state,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn state(&self) -> &ServiceState {
        &self.state
    }
}

impl Drop for RunningService {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}
