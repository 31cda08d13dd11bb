use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use sketchlab::sketch::write_pgm;

use crate::error::CliError;
use crate::session::{ServiceModels, Session};

pub struct AppState {
    pub models: ServiceModels,
    sessions: Mutex<HashMap<u64, Arc<Mutex<Session>>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(models: ServiceModels) -> Arc<Self> {
        Arc::new(Self {
            models,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    fn session(&self, id: u64) -> Option<Arc<Mutex<Session>>> {
        self.sessions.lock().expect("session table").get(&id).cloned()
    }
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct NewSession {
    target: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StrokeBody {
    points: Vec<[f64; 2]>,
}

fn error(status: StatusCode, msg: impl ToString) -> Response {
    (status, Json(json!({ "error": msg.to_string() }))).into_response()
}

fn parse_id(raw: &str) -> Result<u64, Response> {
    raw.parse().map_err(|_| error(StatusCode::NOT_FOUND, format!("unknown session {raw}")))
}

async fn healthz() -> &'static str {
    "ok"
}

async fn create_session(State(st): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: NewSession = if body.iter().all(u8::is_ascii_whitespace) {
        NewSession::default()
    } else {
        match serde_json::from_slice(&body) {
            Ok(r) => r,
            Err(e) => return error(StatusCode::BAD_REQUEST, e),
        }
    };
    if let Some(t) = req.target {
        if st.models.gallery.index_of(t).is_err() {
            return error(StatusCode::BAD_REQUEST, format!("target {t} is not in the gallery"));
        }
    }
    let id = st.next_id.fetch_add(1, Ordering::Relaxed);
    st.sessions.lock().expect("session table").insert(id, Arc::new(Mutex::new(Session::new(req.target))));
    Json(json!({ "session_id": id })).into_response()
}

async fn add_stroke(State(st): State<Arc<AppState>>, Path(raw): Path<String>, body: Bytes) -> Response {
    let id = match parse_id(&raw) {
        Ok(id) => id,
        Err(r) => return r,
    };
    let Some(session) = st.session(id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown session {id}"));
    };
    let req: StrokeBody = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let res = tokio::task::spawn_blocking(move || {
        let mut s = session.lock().expect("session lock");
        s.add_stroke(&st.models, &req.points)
    })
    .await;
    match res {
        Ok(Ok(resp)) => Json(resp).into_response(),
        Ok(Err(CliError::Core(e))) => error(StatusCode::BAD_REQUEST, e),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

async fn undo_stroke(State(st): State<Arc<AppState>>, Path(raw): Path<String>) -> Response {
    let id = match parse_id(&raw) {
        Ok(id) => id,
        Err(r) => return r,
    };
    let Some(session) = st.session(id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown session {id}"));
    };
    let mut s = session.lock().expect("session lock");
    match s.undo() {
        Some(last) => Json(json!({ "strokes": s.history.len(), "last": last })).into_response(),
        None => error(StatusCode::CONFLICT, "no stroke to undo"),
    }
}

async fn gallery_photo(State(st): State<Arc<AppState>>, Path(file): Path<String>) -> Response {
    let Some(id) = file.strip_suffix(".pgm").and_then(|s| s.parse::<u64>().ok()) else {
        return error(StatusCode::NOT_FOUND, format!("no photo {file}"));
    };
    let Some(photo) = st.models.photo(id) else {
        return error(StatusCode::NOT_FOUND, format!("no photo {file}"));
    };
    let mut buf = Vec::new();
    if let Err(e) = write_pgm(&mut buf, photo) {
        return error(StatusCode::INTERNAL_SERVER_ERROR, e);
    }
    ([(header::CONTENT_TYPE, "image/x-portable-graymap")], buf).into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/session", post(create_session))
        .route("/session/{id}/stroke", post(add_stroke).delete(undo_stroke))
        .route("/gallery/{file}", get(gallery_photo))
        .with_state(state)
}

/// Binds `addr` and serves until the task is dropped. Returns the bound
/// address, which matters when port 0 was requested.
pub async fn bind(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<(SocketAddr, impl std::future::Future<Output = std::io::Result<()>>)> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    let app = router(state);
    Ok((local, async move { axum::serve(listener, app).await }))
}
