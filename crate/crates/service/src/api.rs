//! HTTP/JSON API.
//!
//! | Method | Path | Success | Errors |
//! |---|---|---|---|
//! | POST | `/sessions` | 201 `{session_id}` | 409 dyad already has an open session, 400 |
//! | GET | `/sessions/{id}` | 200 session state | 404 |
//! | POST | `/sessions/{id}/actions` | 202 receipt | 400 with `line`, 404 |
//! | POST | `/sessions/{id}/turns` | 200 talk move | 503 `BACKEND_FAILURE` with the fallback move, 404 unknown or closed |
//! | POST | `/sessions/{id}/close` | 200 | 404 |
//! | GET | `/dyads/{id}/learner-model` | 200 latest snapshot | 404 |
//! | GET | `/traces/{id}` | 200 trace | 404 |
//! | GET | `/analytics/rq1` .. `/analytics/rq4` | 200 report | 422 too little data |
//! | GET | `/export/sessions`, `/export/traces` | 200 JSON Lines | |
//! | GET, PUT | `/admin/rule-table` | 200 | 400 invalid table, 401 |

use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use copa_core::analytics::{self, AnalysisOptions, BinScheme, Normalization};
use copa_core::audit::{self, AuditConfig, Pooling};
use copa_core::backends::Embedder;
use copa_core::dialogue::PolicyRuleTable;
use copa_core::engine::Engine;
use copa_core::ingest::parse_jsonl;
use copa_core::model::{DyadId, LoggedAction, SessionId, TaskId, Timestamp, TraceId};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::store::Persistent;

pub struct AppState {
    pub engine: Arc<Engine>,
    pub persist: Option<Arc<Persistent>>,
    pub embedder: Arc<dyn Embedder>,
    /// Bearer token for admin routes, read from the environment.
    pub admin_token: Option<String>,
}

pub const ADMIN_TOKEN_ENV: &str = "COPA_ADMIN_TOKEN";

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
    line: Option<usize>,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into(), line: None }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut err = json!({ "code": self.code, "message": self.message });
        if let Some(l) = self.line {
            err["line"] = json!(l);
        }
        (self.status, Json(json!({ "error": err }))).into_response()
    }
}

impl From<copa_core::Error> for ApiError {
    fn from(e: copa_core::Error) -> Self {
        use copa_core::Error as E;
        let (status, code) = match &e {
            E::Invalid(_) | E::Json(_) | E::RubricTaskMismatch { .. } | E::TaskMismatch(..) => {
                (StatusCode::BAD_REQUEST, "INVALID")
            }
            E::UnknownTask(_) => (StatusCode::BAD_REQUEST, "UNKNOWN_TASK"),
            E::UnknownDyad(_) => (StatusCode::NOT_FOUND, "UNKNOWN_DYAD"),
            E::UnknownSession(_) => (StatusCode::NOT_FOUND, "UNKNOWN_SESSION"),
            E::SessionClosed(_) => (StatusCode::NOT_FOUND, "SESSION_CLOSED"),
            E::SessionAlreadyOpen { .. } => (StatusCode::CONFLICT, "SESSION_ALREADY_OPEN"),
            E::StaleWrite { .. } => (StatusCode::CONFLICT, "STALE_WRITE"),
            E::InsufficientData(_) => (StatusCode::UNPROCESSABLE_ENTITY, "INSUFFICIENT_DATA"),
            E::IncompleteTrace(_) => (StatusCode::UNPROCESSABLE_ENTITY, "INCOMPLETE_TRACE"),
            E::Backend(_) => (StatusCode::SERVICE_UNAVAILABLE, "BACKEND_FAILURE"),
            E::NoExpertReference(_) | E::Persistence(_) | E::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL"),
        };
        Self::new(status, code, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn now_ms() -> Timestamp {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as Timestamp).unwrap_or(0)
}

/// Runs engine work off the async executor.
async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e.to_string()))?
}

fn after_write(state: &AppState) {
    if let Some(p) = &state.persist {
        if let Err(e) = p.maybe_snapshot() {
            tracing::error!(error = %e, "snapshot failed");
        }
    }
}

fn parse_id<T: std::str::FromStr<Err = copa_core::Error>>(s: &str) -> ApiResult<T> {
    s.parse::<T>().map_err(ApiError::from)
}

pub fn router(state: Arc<AppState>, static_dir: Option<&Path>) -> Router {
    let mut app = Router::new()
        .route("/health", get(|| async { Json(json!({ "status": "ok" })) }))
        .route("/sessions", post(open_session))
        .route("/sessions/{id}", get(session_state))
        .route("/sessions/{id}/actions", post(append_actions))
        .route("/sessions/{id}/turns", post(run_turn))
        .route("/sessions/{id}/close", post(close_session))
        .route("/dyads/{id}/learner-model", get(learner_model))
        .route("/traces/{id}", get(trace))
        .route("/analytics/rq1", get(rq1))
        .route("/analytics/rq2", get(rq2))
        .route("/analytics/rq3", get(rq3))
        .route("/analytics/rq4", get(rq4))
        .route("/export/sessions", get(export_sessions))
        .route("/export/traces", get(export_traces))
        .route("/admin/rule-table", get(get_rules).put(put_rules))
        .with_state(state);
    if let Some(dir) = static_dir {
        app = app.nest_service("/app", tower_http::services::ServeDir::new(dir));
    }
    app
}

#[derive(Deserialize)]
struct OpenRequest {
    dyad: DyadId,
    task: TaskId,
    #[serde(default)]
    session: Option<SessionId>,
    #[serde(default)]
    at: Option<Timestamp>,
}

async fn open_session(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let req: OpenRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "INVALID", format!("session request: {e}")))?;
    let s = st.clone();
    let id = blocking(move || Ok(s.engine.open_session_as(req.session, &req.dyad, &req.task, req.at.unwrap_or_else(now_ms))?)).await?;
    after_write(&st);
    Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))).into_response())
}

async fn session_state(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let id: SessionId = parse_id(&id)?;
    let (model, mastery, actions) = st.engine.session_state(&id)?;
    let open = st.engine.is_open(&id)?;
    Ok(Json(json!({ "session_id": id, "open": open, "actions": actions, "mastery": mastery, "model": model })))
}

/// A JSON array, or JSON Lines with one action per line.
fn parse_actions(body: &[u8]) -> ApiResult<Vec<LoggedAction>> {
    let text = std::str::from_utf8(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "INVALID_ACTION", e.to_string()))?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(text).map_err(|e| ApiError {
            line: Some(e.line()),
            ..ApiError::new(StatusCode::BAD_REQUEST, "INVALID_ACTION", format!("line {}: {e}", e.line()))
        });
    }
    parse_jsonl(text).map_err(|(line, msg)| ApiError {
        line: Some(line),
        ..ApiError::new(StatusCode::BAD_REQUEST, "INVALID_ACTION", format!("line {line}: {msg}"))
    })
}

async fn append_actions(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Response> {
    let id: SessionId = parse_id(&id)?;
    let actions = parse_actions(&body)?;
    let s = st.clone();
    let receipt = blocking(move || Ok(s.engine.append_actions(&id, actions)?)).await?;
    after_write(&st);
    Ok((StatusCode::ACCEPTED, Json(receipt)).into_response())
}

#[derive(Deserialize)]
struct TurnBody {
    message: String,
    #[serde(default)]
    at: Option<Timestamp>,
}

#[derive(Serialize)]
struct TurnReply {
    talk_move: String,
    trace_id: TraceId,
    policy: copa_core::model::PolicyKind,
    state: copa_core::model::DialogueStateLabel,
    flags: Vec<copa_core::model::TraceFlag>,
    learner_model_version: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<Value>,
}

async fn run_turn(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Response> {
    let id: SessionId = parse_id(&id)?;
    let req: TurnBody = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "INVALID", format!("turn request: {e}")))?;
    let s = st.clone();
    let out = blocking(move || Ok(s.engine.run_turn(&id, &req.message, req.at.unwrap_or_else(now_ms))?)).await?;
    after_write(&st);
    let failed = out.backend_failed();
    let reply = TurnReply {
        talk_move: out.talk_move.text,
        trace_id: out.trace.trace.clone(),
        policy: out.talk_move.policy.kind,
        state: out.trace.dialogue_state.label,
        flags: out.trace.flags.clone(),
        learner_model_version: out.committed_version,
        error: failed.then(|| {
            json!({ "code": "BACKEND_FAILURE", "message": "the reasoning backend failed after retries; a fallback move was used" })
        }),
    };
    let status = if failed { StatusCode::SERVICE_UNAVAILABLE } else { StatusCode::OK };
    Ok((status, Json(reply)).into_response())
}

#[derive(Deserialize, Default)]
struct CloseBody {
    #[serde(default)]
    at: Option<Timestamp>,
}

async fn close_session(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Json<Value>> {
    let id: SessionId = parse_id(&id)?;
    let req: CloseBody = if body.iter().all(u8::is_ascii_whitespace) {
        CloseBody::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "INVALID", e.to_string()))?
    };
    let s = st.clone();
    let sid = id.clone();
    blocking(move || Ok(s.engine.close_session(&sid, req.at.unwrap_or_else(now_ms))?)).await?;
    after_write(&st);
    Ok(Json(json!({ "session_id": id, "open": false })))
}

async fn learner_model(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let dyad: DyadId = parse_id(&id)?;
    let m = st.engine.learner_model(&dyad)?;
    Ok(Json(serde_json::to_value(&*m).map_err(copa_core::Error::from)?))
}

async fn trace(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    let tid: TraceId = parse_id(&id)?;
    let t = st
        .engine
        .trace(&tid)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "UNKNOWN_TRACE", format!("unknown trace {tid}")))?;
    Ok(Json(serde_json::to_value(&*t).map_err(copa_core::Error::from)?))
}

#[derive(Deserialize)]
struct RqQuery {
    scheme: Option<String>,
    #[serde(default)]
    pooled: bool,
    normalization: Option<Normalization>,
}

impl RqQuery {
    fn options(&self, default: BinScheme) -> ApiResult<AnalysisOptions> {
        let scheme = match &self.scheme {
            Some(s) => s.parse()?,
            None => default,
        };
        Ok(AnalysisOptions { scheme, pooled: self.pooled, normalization: self.normalization.unwrap_or_default() })
    }
}

fn to_json<T: Serialize>(v: &T) -> ApiResult<Json<Value>> {
    Ok(Json(serde_json::to_value(v).map_err(copa_core::Error::from)?))
}

async fn rq1(State(st): State<Arc<AppState>>, Query(q): Query<RqQuery>) -> ApiResult<Json<Value>> {
    let opts = q.options(BinScheme::Quintile)?;
    blocking(move || to_json(&analytics::rq1_policy_adaptation(&st.engine.records()?, opts)?)).await
}

async fn rq2(State(st): State<Arc<AppState>>, Query(q): Query<RqQuery>) -> ApiResult<Json<Value>> {
    let opts = q.options(BinScheme::Decile)?;
    blocking(move || to_json(&analytics::rq2_probe_success(&st.engine.records()?, opts)?)).await
}

async fn rq3(State(st): State<Arc<AppState>>, Query(q): Query<RqQuery>) -> ApiResult<Json<Value>> {
    let opts = q.options(BinScheme::Decile)?;
    blocking(move || to_json(&analytics::rq3_reliance(&st.engine.records()?, opts)?)).await
}

#[derive(Deserialize)]
struct Rq4Query {
    n1: Option<usize>,
    n2: Option<usize>,
    seed: Option<u64>,
    pooling: Option<Pooling>,
}

async fn rq4(State(st): State<Arc<AppState>>, Query(q): Query<Rq4Query>) -> ApiResult<Json<Value>> {
    let d = AuditConfig::default();
    let config = AuditConfig {
        n1: q.n1.unwrap_or(d.n1),
        n2: q.n2.unwrap_or(d.n2),
        seed: q.seed.unwrap_or(d.seed),
        pooling: q.pooling.unwrap_or(d.pooling),
        ..d
    };
    blocking(move || {
        let traces: Vec<_> = st.engine.records()?.into_iter().flat_map(|r| r.traces).collect();
        to_json(&audit::audit(&traces, st.embedder.as_ref(), &config)?)
    })
    .await
}

fn jsonl<T: Serialize>(items: impl IntoIterator<Item = T>) -> ApiResult<Response> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, &item).map_err(copa_core::Error::from)?;
        out.push(b'\n');
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], out).into_response())
}

async fn export_sessions(State(st): State<Arc<AppState>>) -> ApiResult<Response> {
    blocking(move || jsonl(st.engine.records()?)).await
}

async fn export_traces(State(st): State<Arc<AppState>>) -> ApiResult<Response> {
    blocking(move || jsonl(st.engine.records()?.into_iter().flat_map(|r| r.traces))).await
}

fn check_admin(st: &AppState, headers: &HeaderMap) -> ApiResult<()> {
    let Some(token) = &st.admin_token else { return Ok(()) };
    let given = headers.get(header::AUTHORIZATION).and_then(|v| v.to_str().ok()).and_then(|v| v.strip_prefix("Bearer "));
    if given == Some(token.as_str()) {
        Ok(())
    } else {
        Err(ApiError::new(StatusCode::UNAUTHORIZED, "UNAUTHORIZED", "admin routes need the bearer token"))
    }
}

async fn get_rules(State(st): State<Arc<AppState>>) -> ApiResult<Json<Value>> {
    to_json(&*st.engine.dialogue.rules())
}

async fn put_rules(State(st): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> ApiResult<Json<Value>> {
    check_admin(&st, &headers)?;
    let text = std::str::from_utf8(&body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "INVALID", e.to_string()))?;
    let table = PolicyRuleTable::from_json(text)?;
    if let Some(p) = &st.persist {
        p.save_rules(&table).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "INTERNAL", e.to_string()))?;
    }
    let rules = table.rules.len();
    st.engine.dialogue.reload_rules(table)?;
    Ok(Json(json!({ "reloaded": true, "rules": rules })))
}
