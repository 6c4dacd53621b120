//! HTTP+JSON front end over [`Session`]s.
//!
//! Sessions live in a shared map; each one sits behind its own async mutex so
//! requests to one session run one at a time in arrival order while different
//! sessions proceed independently. Model weights are shared read-only.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use rand::RngCore;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use ngd_core::rng;

use crate::session::{Models, Session, SessionError};

pub struct AppState {
    models: Arc<Models>,
    sessions: Mutex<HashMap<String, Arc<tokio::sync::Mutex<Session>>>>,
    next_id: AtomicU64,
    seed: u64,
}

impl AppState {
    pub fn new(models: Models, seed: u64) -> Arc<Self> {
        Arc::new(Self { models: Arc::new(models), sessions: Mutex::new(HashMap::new()), next_id: AtomicU64::new(1), seed })
    }

    fn session(&self, id: &str) -> Result<Arc<tokio::sync::Mutex<Session>>, ApiError> {
        self.sessions.lock().expect("session map lock").get(id).cloned().ok_or(ApiError::UnknownSession)
    }
}

#[derive(Debug)]
pub enum ApiError {
    Session(SessionError),
    UnknownSession,
    BadRequest(String),
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        ApiError::Session(e)
    }
}

impl From<ngd_core::Error> for ApiError {
    fn from(e: ngd_core::Error) -> Self {
        ApiError::Session(SessionError::Core(e))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, tag, message) = match &self {
            ApiError::Session(SessionError::Unparseable(e)) => {
                (StatusCode::BAD_REQUEST, "unparseable_expression", e.to_string())
            }
            ApiError::Session(e @ SessionError::UnknownObject(_)) => {
                (StatusCode::BAD_REQUEST, "unknown_object", e.to_string())
            }
            ApiError::Session(e @ SessionError::NoInstruction) => (StatusCode::CONFLICT, "no_instruction", e.to_string()),
            ApiError::Session(SessionError::Core(e)) => {
                (StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
            }
            ApiError::UnknownSession => (StatusCode::NOT_FOUND, "unknown_session", "no such session".to_owned()),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, "bad_request", m.clone()),
        };
        (status, Json(json!({ "error": tag, "message": message }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
struct InstructBody {
    text: String,
}

#[derive(Debug, Deserialize)]
struct StepBody {
    count: usize,
}

#[derive(Debug, Default, Deserialize)]
struct ResetBody {
    seed: Option<u64>,
}

#[derive(Debug, Serialize)]
struct Created {
    session_id: String,
}

/// Empty bodies deserialize as `T::default()` when `T` allows it.
fn parse_body<T: DeserializeOwned>(bytes: &Bytes, default: Option<T>) -> Result<T, ApiError> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return default.ok_or_else(|| ApiError::BadRequest("request body is required".into()));
    }
    serde_json::from_slice(bytes).map_err(|e| ApiError::BadRequest(e.to_string()))
}

async fn create(State(app): State<Arc<AppState>>) -> Result<(StatusCode, Json<Created>), ApiError> {
    let n = app.next_id.fetch_add(1, Ordering::SeqCst);
    let id = format!("s{n}");
    let seed = rng::indexed(app.seed, "session", n).next_u64();
    let session = Session::new(id.clone(), seed, &app.models)?;
    app.sessions.lock().expect("session map lock").insert(id.clone(), Arc::new(tokio::sync::Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(Created { session_id: id })))
}

async fn state(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let s = app.session(&id)?;
    let s = s.lock().await;
    Ok(Json(s.view(&app.models)?).into_response())
}

async fn instruct(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let s = app.session(&id)?;
    let body: InstructBody = parse_body(&body, None)?;
    let mut s = s.lock().await;
    Ok(Json(s.instruct(&body.text, &app.models)?).into_response())
}

async fn step(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let s = app.session(&id)?;
    let body: StepBody = parse_body(&body, Some(StepBody { count: 1 }))?;
    let mut s = s.lock().await;
    Ok(Json(s.step(body.count, &app.models)?).into_response())
}

async fn reset(State(app): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Result<Response, ApiError> {
    let s = app.session(&id)?;
    let body: ResetBody = parse_body(&body, Some(ResetBody::default()))?;
    let mut s = s.lock().await;
    s.reset(body.seed, &app.models)?;
    Ok(Json(s.view(&app.models)?).into_response())
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/session", post(create))
        .route("/api/session/{id}/state", get(state))
        .route("/api/session/{id}/instruct", post(instruct))
        .route("/api/session/{id}/step", post(step))
        .route("/api/session/{id}/reset", post(reset))
        .with_state(app)
}

pub async fn serve(addr: SocketAddr, app: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(app)).await
}
