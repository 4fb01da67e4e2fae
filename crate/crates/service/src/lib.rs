//! HTTP/JSON chat API over the dialogue pipeline, plus static hosting for
//! the browser console.

pub mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{Mutex, RwLock};
use tower_http::services::ServeDir;

use unirqr_core::model::Model;
use unirqr_core::pipeline::{respond_with_mode, ForceMode, PipelineConfig, PipelineError};
use unirqr_core::retrieval::Retriever;
use unirqr_core::DialogueTurn;

pub use session::{Session, SessionStore};

pub struct AppState {
    model: Option<Arc<Model>>,
    retriever: Arc<dyn Retriever>,
    pipeline: PipelineConfig,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    store: Option<std::sync::Mutex<SessionStore>>,
}

impl AppState {
    pub fn new(model: Option<Model>, retriever: Arc<dyn Retriever>, pipeline: PipelineConfig) -> Self {
        Self { model: model.map(Arc::new), retriever, pipeline, sessions: RwLock::new(HashMap::new()), store: None }
    }

    /// Persists sessions to `store` and restores the ones it already holds.
    pub fn with_store(mut self, store: SessionStore, restored: Vec<Session>) -> Self {
        let map = restored.into_iter().map(|s| (s.id.clone(), Arc::new(Mutex::new(s)))).collect();
        self.sessions = RwLock::new(map);
        self.store = Some(std::sync::Mutex::new(store));
        self
    }

    fn persist(&self, s: &Session) {
        if let Some(store) = &self.store {
            if let Err(e) = store.lock().expect("store lock").save(s) {
                tracing::error!("persisting session {}: {e}", s.id);
            }
        }
    }

    async fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions.read().await.get(id).cloned().ok_or(ApiError::NotFound)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("no model loaded")]
    NoModel,
    #[error("session not found")]
    NotFound,
    #[error("{0}")]
    BadRequest(String),
    #[error("{message}")]
    Pipeline { message: String, partial: serde_json::Value },
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self {
            ApiError::NoModel => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::NotFound => StatusCode::NOT_FOUND,
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::Pipeline { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = match &self {
            ApiError::Pipeline { message, partial } => json!({ "error": message, "partial": partial }),
            other => json!({ "error": other.to_string() }),
        };
        (status, Json(body)).into_response()
    }
}

#[derive(Debug, Default, Deserialize)]
pub struct CreateSession {
    #[serde(default)]
    pub mode: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct Created {
    pub id: String,
    pub mode: ForceMode,
}

#[derive(Debug, Deserialize)]
pub struct PostMessage {
    pub text: String,
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let sessions = state.sessions.read().await.len();
    Json(json!({ "status": "ok", "model_loaded": state.model.is_some(), "sessions": sessions }))
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: axum::body::Bytes,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    if state.model.is_none() {
        return Err(ApiError::NoModel);
    }
    // An empty body, `null` and `{}` all mean defaults.
    let body: Option<CreateSession> = if body.iter().all(u8::is_ascii_whitespace) {
        None
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("invalid body: {e}")))?
    };
    let mode = match body.and_then(|b| b.mode) {
        None => ForceMode::Auto,
        Some(m) => ForceMode::from_name(&m).ok_or_else(|| ApiError::BadRequest(format!("unknown mode {m:?}")))?,
    };
    let s = Session::new(mode);
    state.persist(&s);
    let created = Created { id: s.id.clone(), mode };
    state.sessions.write().await.insert(s.id.clone(), Arc::new(Mutex::new(s)));
    Ok((StatusCode::CREATED, Json(created)))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Session>, ApiError> {
    let s = state.session(&id).await?;
    let s = s.lock().await.clone();
    Ok(Json(s))
}

async fn delete_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    state.sessions.write().await.remove(&id).ok_or(ApiError::NotFound)?;
    if let Some(store) = &state.store {
        if let Err(e) = store.lock().expect("store lock").delete(&id) {
            tracing::error!("persisting deletion of {id}: {e}");
        }
    }
    Ok(StatusCode::NO_CONTENT)
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<PostMessage>,
) -> Result<Response, ApiError> {
    let model = state.model.clone().ok_or(ApiError::NoModel)?;
    let text = body.text.trim().to_string();
    if text.is_empty() {
        return Err(ApiError::BadRequest("message text is empty".into()));
    }
    let handle = state.session(&id).await?;
    // Held for the whole turn so messages within a session never interleave.
    let mut session = handle.lock().await;
    let mut context = session.turns.clone();
    context.push(DialogueTurn::user(text.clone()));

    let retriever = state.retriever.clone();
    let pipeline = state.pipeline.clone();
    let mode = session.mode;
    let turn_context = context.clone();
    let outcome = tokio::task::spawn_blocking(move || respond_with_mode(&turn_context, &model, retriever.as_ref(), &pipeline, mode))
        .await
        .map_err(|e| ApiError::Pipeline { message: format!("inference task failed: {e}"), partial: serde_json::Value::Null })?;

    let trace = match outcome {
        Ok(t) => t,
        Err(PipelineError::Model { stage, source, partial }) => {
            return Err(ApiError::Pipeline {
                message: format!("{stage} failed: {source}"),
                partial: serde_json::to_value(&*partial).unwrap_or_default(),
            })
        }
        Err(e @ PipelineError::Contract(_)) => return Err(ApiError::BadRequest(e.to_string())),
    };
    session.turns = context;
    session.turns.push(DialogueTurn::bot(trace.response.clone()));
    session.traces.push(trace.clone());
    session.updated_at = session::now_ms();
    state.persist(&session);
    Ok(Json(trace).into_response())
}

/// API routes, plus the console bundle under `/console` when a directory is given.
pub fn router(state: Arc<AppState>, console_dir: Option<PathBuf>) -> Router {
    let mut app = Router::new()
        .route("/api/health", get(health))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session).delete(delete_session))
        .route("/api/sessions/{id}/messages", post(post_message))
        .with_state(state);
    if let Some(dir) = console_dir {
        app = app.nest_service("/console", ServeDir::new(dir).append_index_html_on_directories(true));
    }
    app
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, app: Router) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
