//! Local HTTP service for the analyst-in-the-loop design workflow.
//!
//! Sessions are event-sourced: each successful mutation is appended to
//! `<workdir>/sessions/<id>/events.jsonl` together with a digest of its
//! response, and sessions are rebuilt from those logs on startup.

pub mod error;
pub mod schema;
pub mod session;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{FromRequest, Multipart, Path as UrlPath, Request, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

pub use error::{ApiError, ApiResult, FieldError};
use session::{
    replay, response_digest, EnumerateRequest, Event, EvolveRequest, LockRequest, LogEntry,
    RandomizeRequest, RestrictRequest, ScoreRequest, Session, TestRequest,
};

pub const EVENTS: &str = "events.jsonl";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub workdir: PathBuf,
    /// Directory of a built dashboard, served for non-API paths.
    pub static_dir: Option<PathBuf>,
}

pub struct SessionHandle {
    /// Serializes mutations; readers only take `state`.
    writer: tokio::sync::Mutex<()>,
    state: RwLock<Session>,
    log: PathBuf,
}

impl SessionHandle {
    fn snapshot(&self) -> Session {
        self.state.read().expect("session lock").clone()
    }

    fn append(&self, entry: &LogEntry) -> std::io::Result<()> {
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.log)?;
        writeln!(f, "{}", serde_json::to_string(entry)?)?;
        f.sync_data()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct Job {
    pub id: String,
    pub session: String,
    pub kind: &'static str,
    pub status: JobStatus,
    pub result: Option<Value>,
    pub error: Option<Value>,
}

pub struct AppState {
    cfg: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<SessionHandle>>>,
    jobs: RwLock<HashMap<String, Job>>,
}

pub type Shared = Arc<AppState>;

fn read_log(path: &Path) -> std::io::Result<Vec<LogEntry>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(std::io::Error::other))
        .collect()
}

impl AppState {
    /// Open `cfg.workdir`, rebuilding every session found there.
    pub fn open(cfg: ServiceConfig) -> std::io::Result<Shared> {
        let root = cfg.workdir.join("sessions");
        fs::create_dir_all(&root)?;
        let mut sessions = HashMap::new();
        for entry in fs::read_dir(&root)? {
            let dir = entry?.path();
            let log = dir.join(EVENTS);
            if !log.exists() {
                continue;
            }
            let id = dir
                .file_name()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let entries = read_log(&log)?;
            let (mut s, report) = replay(&id, &dir, &entries);
            if !report.consistent {
                return Err(std::io::Error::other(format!(
                    "session {id}: events {:?} no longer reproduce their responses",
                    report.mismatches
                )));
            }
            s.set_replaying(false);
            sessions.insert(
                id,
                Arc::new(SessionHandle {
                    writer: tokio::sync::Mutex::new(()),
                    state: RwLock::new(s),
                    log,
                }),
            );
        }
        Ok(Arc::new(AppState {
            cfg,
            sessions: RwLock::new(sessions),
            jobs: RwLock::new(HashMap::new()),
        }))
    }

    fn session(&self, id: &str) -> ApiResult<Arc<SessionHandle>> {
        self.sessions
            .read()
            .expect("sessions lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::NotFound(format!("no session {id}")))
    }

    fn create(&self) -> ApiResult<String> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let dir = self.cfg.workdir.join("sessions").join(&id);
        fs::create_dir_all(&dir).map_err(|e| ApiError::Internal(e.to_string()))?;
        let log = dir.join(EVENTS);
        fs::File::create(&log).map_err(|e| ApiError::Internal(e.to_string()))?;
        let handle = SessionHandle {
            writer: tokio::sync::Mutex::new(()),
            state: RwLock::new(Session::new(id.clone(), dir, false)),
            log,
        };
        self.sessions
            .write()
            .expect("sessions lock")
            .insert(id.clone(), Arc::new(handle));
        Ok(id)
    }
}

/// Apply `ev` on a copy of the session and publish it atomically.
async fn mutate(h: Arc<SessionHandle>, ev: Event) -> ApiResult<Value> {
    let _writer = h.writer.lock().await;
    let h2 = h.clone();
    tokio::task::spawn_blocking(move || {
        let mut next = h2.snapshot();
        let resp = next.apply(&ev)?;
        let entry = LogEntry {
            seq: next.events() - 1,
            response_sha256: response_digest(&resp),
            event: ev,
        };
        h2.append(&entry)
            .map_err(|e| ApiError::Internal(e.to_string()))?;
        *h2.state.write().expect("session lock") = next;
        Ok(resp)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))?
}

/// JSON body whose deserialization errors carry the offending field path.
pub struct Body<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        let bytes = Bytes::from_request(req, state)
            .await
            .map_err(|e| ApiError::invalid(e.to_string()))?;
        let bytes = if bytes.iter().all(u8::is_ascii_whitespace) {
            Bytes::from_static(b"{}")
        } else {
            bytes
        };
        let de = &mut serde_json::Deserializer::from_slice(&bytes);
        serde_path_to_error::deserialize(de).map(Body).map_err(|e| {
            let path = e.path().to_string();
            ApiError::field(
                if path == "." { String::new() } else { path },
                e.inner().to_string(),
            )
        })
    }
}

async fn sync_event(st: &Shared, id: &str, ev: Event) -> ApiResult<Json<Value>> {
    let h = st.session(id)?;
    Ok(Json(mutate(h, ev).await?))
}

/// Queue `ev` as a background job after the cheap checks pass.
async fn job_event(st: Shared, id: String, ev: Event) -> ApiResult<Response> {
    let h = st.session(&id)?;
    h.snapshot().precheck(&ev)?;
    let job_id = uuid::Uuid::new_v4().simple().to_string();
    let job = Job {
        id: job_id.clone(),
        session: id,
        kind: ev.name(),
        status: JobStatus::Running,
        result: None,
        error: None,
    };
    st.jobs
        .write()
        .expect("jobs lock")
        .insert(job_id.clone(), job);
    let st2 = st.clone();
    let jid = job_id.clone();
    tokio::spawn(async move {
        let out = mutate(h, ev).await;
        let mut jobs = st2.jobs.write().expect("jobs lock");
        if let Some(j) = jobs.get_mut(&jid) {
            match out {
                Ok(v) => {
                    j.status = JobStatus::Done;
                    j.result = Some(v);
                }
                Err(e) => {
                    j.status = JobStatus::Failed;
                    j.error = Some(json!({ "status": e.status().as_u16(), "body": e.body() }));
                }
            }
        }
    });
    let body = json!({ "job_id": job_id, "status": JobStatus::Running, "poll": format!("/api/jobs/{job_id}") });
    Ok((StatusCode::ACCEPTED, Json(body)).into_response())
}

async fn multipart_fields(mut mp: Multipart) -> ApiResult<HashMap<String, String>> {
    let mut out = HashMap::new();
    while let Some(field) = mp
        .next_field()
        .await
        .map_err(|e| ApiError::invalid(e.to_string()))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let text = field
            .text()
            .await
            .map_err(|e| ApiError::field(&name, e.to_string()))?;
        out.insert(name, text);
    }
    Ok(out)
}

fn required(fields: &mut HashMap<String, String>, name: &str) -> ApiResult<String> {
    fields
        .remove(name)
        .ok_or_else(|| ApiError::field(name, format!("multipart field '{name}' is required")))
}

fn reject_unknown(fields: &HashMap<String, String>) -> ApiResult<()> {
    match fields.keys().next() {
        Some(k) => Err(ApiError::field(k, format!("unknown multipart field '{k}'"))),
        None => Ok(()),
    }
}

async fn schema() -> Json<Value> {
    Json(schema::describe())
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok", "core_version": igr_core::CORE_VERSION }))
}

async fn create_session(State(st): State<Shared>) -> ApiResult<Response> {
    let id = st.create()?;
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))).into_response())
}

async fn list_sessions(State(st): State<Shared>) -> Json<Value> {
    let map = st.sessions.read().expect("sessions lock");
    let mut ids: Vec<&String> = map.keys().collect();
    ids.sort();
    Json(json!({ "sessions": ids }))
}

async fn get_session(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<Value>> {
    Ok(Json(st.session(&id)?.snapshot().summary()))
}

async fn delete_session(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<StatusCode> {
    let h = st.session(&id)?;
    let _writer = h.writer.lock().await;
    let s = h.snapshot();
    if s.is_locked() {
        return Err(ApiError::Conflict(
            "a locked session is an audit record and cannot be deleted".into(),
        ));
    }
    st.sessions.write().expect("sessions lock").remove(&id);
    fs::remove_dir_all(s.dir()).map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(StatusCode::NO_CONTENT)
}

async fn upload_covariates(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    mp: Multipart,
) -> ApiResult<Json<Value>> {
    let mut f = multipart_fields(mp).await?;
    let csv = required(&mut f, "file")?;
    let sidecar = match f.remove("sidecar") {
        Some(s) => {
            serde_json::from_str(&s).map_err(|e| ApiError::field("sidecar", e.to_string()))?
        }
        None => Default::default(),
    };
    reject_unknown(&f)?;
    sync_event(&st, &id, Event::Covariates { csv, sidecar }).await
}

async fn upload_network(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    mp: Multipart,
) -> ApiResult<Json<Value>> {
    let mut f = multipart_fields(mp).await?;
    let edges_csv = required(&mut f, "edges")?;
    let coords_csv = f.remove("coords");
    reject_unknown(&f)?;
    sync_event(
        &st,
        &id,
        Event::Network {
            edges_csv,
            coords_csv,
        },
    )
    .await
}

async fn upload_clusters(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    mp: Multipart,
) -> ApiResult<Json<Value>> {
    let mut f = multipart_fields(mp).await?;
    let csv = required(&mut f, "file")?;
    reject_unknown(&f)?;
    sync_event(&st, &id, Event::Clusters { csv }).await
}

async fn upload_outcomes(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    mp: Multipart,
) -> ApiResult<Json<Value>> {
    let mut f = multipart_fields(mp).await?;
    let csv = required(&mut f, "file")?;
    let column = f.remove("column");
    reject_unknown(&f)?;
    sync_event(&st, &id, Event::Outcomes { csv, column }).await
}

async fn enumerate(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Body(r): Body<EnumerateRequest>,
) -> ApiResult<Response> {
    job_event(st, id, Event::Enumerate(r)).await
}

async fn score(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Body(r): Body<ScoreRequest>,
) -> ApiResult<Response> {
    job_event(st, id, Event::Score(r)).await
}

async fn evolve(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Body(r): Body<EvolveRequest>,
) -> ApiResult<Response> {
    job_event(st, id, Event::Evolve(r)).await
}

async fn restrict(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Body(r): Body<RestrictRequest>,
) -> ApiResult<Json<Value>> {
    sync_event(&st, &id, Event::Restrict(r)).await
}

async fn lock(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Body(r): Body<LockRequest>,
) -> ApiResult<Json<Value>> {
    sync_event(&st, &id, Event::Lock(r)).await
}

async fn randomize(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Body(r): Body<RandomizeRequest>,
) -> ApiResult<Json<Value>> {
    sync_event(&st, &id, Event::Randomize(r)).await
}

async fn test(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Body(r): Body<TestRequest>,
) -> ApiResult<Json<Value>> {
    sync_event(&st, &id, Event::Test(r)).await
}

async fn bundle_file(
    State(st): State<Shared>,
    UrlPath((id, file)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    use igr_core::bundle::{ALLOCATIONS, AUDIT, MANIFEST};
    let s = st.session(&id)?.snapshot();
    if !s.is_locked() {
        return Err(ApiError::Conflict(
            "no bundle until the design is locked".into(),
        ));
    }
    let mime = match file.as_str() {
        f if f == MANIFEST => "application/json",
        f if f == ALLOCATIONS => "text/csv",
        f if f == AUDIT => "application/x-ndjson",
        _ => return Err(ApiError::NotFound(format!("no bundle file {file}"))),
    };
    let path = s.bundle_dir().join(&file);
    let bytes = if path.exists() {
        fs::read(&path).map_err(|e| ApiError::Internal(e.to_string()))?
    } else {
        Vec::new()
    };
    Ok((
        [
            (axum::http::header::CONTENT_TYPE, mime.to_string()),
            (
                axum::http::header::CONTENT_DISPOSITION,
                format!("attachment; filename=\"{file}\""),
            ),
        ],
        bytes,
    )
        .into_response())
}

async fn events(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let h = st.session(&id)?;
    let entries = read_log(&h.log).map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(Json(json!({ "events": entries })))
}

/// Replay the log into a scratch session and compare response digests.
async fn verify_replay(
    State(st): State<Shared>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<Value>> {
    let h = st.session(&id)?;
    let log = h.log.clone();
    let report = tokio::task::spawn_blocking(move || -> ApiResult<_> {
        let entries = read_log(&log).map_err(|e| ApiError::Internal(e.to_string()))?;
        let scratch = tempfile::tempdir().map_err(|e| ApiError::Internal(e.to_string()))?;
        Ok(replay(&id, scratch.path(), &entries).1)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(
        serde_json::to_value(report).expect("report serializes"),
    ))
}

async fn get_job(State(st): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Job>> {
    st.jobs
        .read()
        .expect("jobs lock")
        .get(&id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::NotFound(format!("no job {id}")))
}

pub fn router(st: Shared) -> Router {
    let api = Router::new()
        .route("/api/schema", get(schema))
        .route("/api/health", get(health))
        .route("/api/sessions", post(create_session).get(list_sessions))
        .route(
            "/api/sessions/{id}",
            get(get_session).delete(delete_session),
        )
        .route("/api/sessions/{id}/covariates", post(upload_covariates))
        .route("/api/sessions/{id}/network", post(upload_network))
        .route("/api/sessions/{id}/clusters", post(upload_clusters))
        .route("/api/sessions/{id}/enumerate", post(enumerate))
        .route("/api/sessions/{id}/score", post(score))
        .route("/api/sessions/{id}/restrict", post(restrict))
        .route("/api/sessions/{id}/evolve", post(evolve))
        .route("/api/sessions/{id}/lock", post(lock))
        .route("/api/sessions/{id}/bundle/{file}", get(bundle_file))
        .route("/api/sessions/{id}/randomize", post(randomize))
        .route("/api/sessions/{id}/outcomes", post(upload_outcomes))
        .route("/api/sessions/{id}/test", post(test))
        .route("/api/sessions/{id}/events", get(events))
        .route("/api/sessions/{id}/replay", post(verify_replay))
        .route("/api/jobs/{id}", get(get_job));
    let api = match &st.cfg.static_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    };
    api.with_state(st)
}

/// Bind `addr` and serve until the process is stopped.
pub async fn serve(addr: SocketAddr, cfg: ServiceConfig) -> std::io::Result<()> {
    let st = AppState::open(cfg)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(st)).await
}
