//! HTTP service for the review loop: suggestions from a per-session working
//! type map, accept/reject decisions, neighbour inspection and map export.

mod session;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::ggnn::Model;
use crate::harness::CheckerHook;
use crate::pygraph::{extract, ExtractOptions};
use crate::typemap::{PredictionConfig, TypeMap};

pub use session::{Decision, FileEntry, LogEntry, Session, SymbolEntry};

pub const DEFAULT_SESSION: &str = "default";

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    pub fn not_found(m: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            message: m.into(),
        }
    }

    pub fn conflict(m: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::CONFLICT,
            message: m.into(),
        }
    }

    pub fn unprocessable(m: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: m.into(),
        }
    }

    fn internal(m: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: m.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

pub type ApiResult<T> = Result<T, ApiError>;

/// Shared, read-only model data plus the mutable session table.
pub struct AppState {
    pub model: Model,
    pub base_map: TypeMap,
    pub config: PredictionConfig,
    pub files: BTreeMap<String, FileEntry>,
    pub checker: Option<CheckerHook>,
    pub export_path: Option<PathBuf>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    next_session: Mutex<u64>,
}

impl AppState {
    /// Extracts and embeds every `(file id, source)` pair. Files that fail
    /// to parse are reported as errors.
    pub fn new(
        model: Model,
        base_map: TypeMap,
        config: PredictionConfig,
        sources: Vec<(String, String)>,
    ) -> Result<AppState, String> {
        if base_map.dim() != model.dim() {
            return Err(format!("map dimension {} does not match the model's {}", base_map.dim(), model.dim()));
        }
        let mut files = BTreeMap::new();
        for (id, source) in sources {
            let ex = extract(&id, &source, &ExtractOptions::default()).map_err(|e| format!("{id}: {e}"))?;
            let embeddings = model.symbol_embeddings(&ex.graph).map_err(|e| format!("{id}: {e}"))?;
            files.insert(id.clone(), FileEntry::new(id, source, ex, embeddings));
        }
        let state = AppState {
            model,
            base_map,
            config,
            files,
            checker: None,
            export_path: None,
            sessions: Mutex::new(HashMap::new()),
            next_session: Mutex::new(0),
        };
        state.insert_session(DEFAULT_SESSION.to_string());
        Ok(state)
    }

    pub fn with_checker(mut self, checker: CheckerHook) -> Self {
        self.checker = Some(checker);
        self
    }

    pub fn with_export_path(mut self, path: PathBuf) -> Self {
        self.export_path = Some(path);
        self
    }

    fn insert_session(&self, id: String) -> Arc<Mutex<Session>> {
        let s = Arc::new(Mutex::new(Session::new(id.clone(), self.base_map.clone())));
        self.sessions.lock().expect("session table").insert(id, s.clone());
        s
    }

    pub fn create_session(&self) -> String {
        let mut n = self.next_session.lock().expect("session counter");
        *n += 1;
        let id = format!("s{}", *n);
        self.insert_session(id.clone());
        id
    }

    pub fn session(&self, id: Option<&str>) -> ApiResult<Arc<Mutex<Session>>> {
        let id = id.unwrap_or(DEFAULT_SESSION);
        self.sessions
            .lock()
            .expect("session table")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("unknown session {id:?}")))
    }
}

type Shared = Arc<AppState>;
type Params = Query<HashMap<String, String>>;

fn with_session<T>(
    st: &AppState,
    q: &HashMap<String, String>,
    f: impl FnOnce(&AppState, &mut Session) -> ApiResult<T>,
) -> ApiResult<T> {
    let s = st.session(q.get("session").map(String::as_str))?;
    let mut guard = s.lock().map_err(|_| ApiError::internal("session lock poisoned"))?;
    f(st, &mut guard)
}

async fn files(State(st): State<Shared>, Query(q): Params) -> ApiResult<Json<Value>> {
    with_session(&st, &q, |st, s| Ok(Json(s.files(st))))
}

async fn suggestions(State(st): State<Shared>, Query(q): Params) -> ApiResult<Json<Value>> {
    let file = q.get("file").ok_or_else(|| ApiError::unprocessable("missing query parameter file"))?;
    with_session(&st, &q, |st, s| s.suggestions(st, file).map(Json))
}

async fn neighbors(State(st): State<Shared>, Query(q): Params) -> ApiResult<Json<Value>> {
    let sym = q
        .get("symbol_id")
        .ok_or_else(|| ApiError::unprocessable("missing query parameter symbol_id"))?;
    let k = match q.get("k") {
        Some(k) => k
            .parse::<usize>()
            .ok()
            .filter(|&k| k > 0)
            .ok_or_else(|| ApiError::unprocessable(format!("k must be a positive integer, got {k:?}")))?,
        None => st.config.k,
    };
    with_session(&st, &q, |st, s| s.neighbors(st, sym, k).map(Json))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionBody {
    symbol_id: String,
    #[serde(rename = "type")]
    ty: String,
}

fn decision_body(body: &Bytes) -> ApiResult<DecisionBody> {
    serde_json::from_slice(body).map_err(|e| ApiError::unprocessable(format!("malformed body: {e}")))
}

async fn accept(State(st): State<Shared>, Query(q): Params, body: Bytes) -> ApiResult<Json<Value>> {
    let b = decision_body(&body)?;
    tokio::task::spawn_blocking(move || with_session(&st, &q, |st, s| s.accept(st, &b.symbol_id, &b.ty).map(Json)))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn reject(State(st): State<Shared>, Query(q): Params, body: Bytes) -> ApiResult<Json<Value>> {
    let b = decision_body(&body)?;
    with_session(&st, &q, |st, s| s.reject(st, &b.symbol_id, &b.ty).map(Json))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionBody {
    #[serde(default)]
    replay: Vec<LogEntry>,
}

/// Creates a session, optionally replaying a previously exported log.
async fn create_session(State(st): State<Shared>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let b: SessionBody = if body.iter().all(u8::is_ascii_whitespace) {
        SessionBody::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(format!("malformed body: {e}")))?
    };
    let id = st.create_session();
    if !b.replay.is_empty() {
        let s = st.session(Some(&id))?;
        let mut guard = s.lock().map_err(|_| ApiError::internal("session lock poisoned"))?;
        if let Err(e) = guard.replay(&st, &b.replay) {
            drop(guard);
            st.sessions.lock().expect("session table").remove(&id);
            return Err(e);
        }
    }
    Ok((StatusCode::CREATED, Json(json!({ "id": id }))))
}

async fn session_log(State(st): State<Shared>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let s = st.session(Some(&id))?;
    let guard = s.lock().map_err(|_| ApiError::internal("session lock poisoned"))?;
    Ok(Json(json!({ "id": id, "log": guard.log })))
}

async fn export_map(State(st): State<Shared>, Query(q): Params) -> ApiResult<Response> {
    let bytes = with_session(&st, &q, |_, s| {
        let mut buf = Vec::new();
        s.map.save(&mut buf).map_err(|e| ApiError::internal(e.to_string()))?;
        Ok(buf)
    })?;
    if let Some(p) = &st.export_path {
        std::fs::write(p, &bytes).map_err(|e| ApiError::internal(format!("{}: {e}", p.display())))?;
    }
    Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/files", get(files))
        .route("/api/suggestions", get(suggestions))
        .route("/api/accept", post(accept))
        .route("/api/reject", post(reject))
        .route("/api/neighbors", get(neighbors))
        .route("/api/session", post(create_session))
        .route("/api/session/{id}/log", get(session_log))
        .route("/api/export-map", get(export_map))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(addr: &str, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await
}
