//! HTTP front end of the annotation loop.
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/api/status` | round, counts, training flag, F1 history; 503 before boot finishes |
//! | GET | `/api/schema` | event types and roles |
//! | GET | `/api/tasks?limit=k` | open tasks, importance-descending; 204 when none |
//! | POST | `/api/labels` | `{id, trigger_labels, argument_labels}`; 404 / 409 / 422 |
//! | DELETE | `/api/labels/{id}` | withdraw the most recent label of the open round |
//!
//! With `ALEE_TOKEN` set every route requires `Authorization: Bearer <token>`.

pub mod session;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};

use alee_core::corpus::LabelSet;
use alee_core::harness::ExperimentConfig;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use log::{error, info};
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};

pub use session::{AnnotationTask, Session, SessionError, Status};

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    pub experiment: ExperimentConfig,
    pub state_dir: PathBuf,
    pub token: Option<String>,
    /// Allowed browser origin; any origin when unset.
    pub cors_origin: Option<String>,
}

#[derive(Clone)]
pub struct AppState {
    session: Arc<Mutex<Option<Session>>>,
    token: Option<Arc<str>>,
}

impl AppState {
    /// State whose session is not loaded yet; every route answers 503 until
    /// [`AppState::install`].
    pub fn uninitialized(token: Option<String>) -> Self {
        AppState {
            session: Arc::new(Mutex::new(None)),
            token: token.map(Into::into),
        }
    }

    pub fn install(&self, session: Session) {
        *self.lock() = Some(session);
    }

    fn lock(&self) -> MutexGuard<'_, Option<Session>> {
        // a panicking handler cannot leave the session half-updated: every
        // mutation is journaled first and applied in one step
        self.session.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Open the session on the blocking pool and install it.
    pub async fn boot(&self, cfg: ExperimentConfig, state_dir: PathBuf) -> Result<(), SessionError> {
        let session = tokio::task::spawn_blocking(move || Session::open(&cfg, &state_dir))
            .await
            .expect("boot task panicked")?;
        info!("session ready at round {}", session.round());
        self.install(session);
        Ok(())
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn not_ready() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "service is still initializing")
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::UnknownId(_) => StatusCode::NOT_FOUND,
            SessionError::AlreadyLabeled(_) | SessionError::NotLast => StatusCode::CONFLICT,
            SessionError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
pub struct TaskQuery {
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelRequest {
    pub id: String,
    pub trigger_labels: Vec<usize>,
    pub argument_labels: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelAck {
    pub id: String,
    pub round: usize,
    pub completed: usize,
    pub pending: usize,
    pub round_advanced: bool,
}

async fn status(State(app): State<AppState>) -> Result<Json<Status>, ApiError> {
    let guard = app.lock();
    let s = guard.as_ref().ok_or_else(ApiError::not_ready)?;
    Ok(Json(s.status()))
}

async fn schema(State(app): State<AppState>) -> Result<Response, ApiError> {
    let guard = app.lock();
    let s = guard.as_ref().ok_or_else(ApiError::not_ready)?;
    Ok(Json(s.schema().clone()).into_response())
}

async fn tasks(State(app): State<AppState>, Query(q): Query<TaskQuery>) -> Result<Response, ApiError> {
    let guard = app.lock();
    let s = guard.as_ref().ok_or_else(ApiError::not_ready)?;
    let tasks = s.tasks(q.limit);
    if tasks.is_empty() {
        return Ok(StatusCode::NO_CONTENT.into_response());
    }
    Ok(Json(tasks).into_response())
}

async fn submit(State(app): State<AppState>, Json(req): Json<LabelRequest>) -> Result<Json<LabelAck>, ApiError> {
    let labels = LabelSet {
        triggers: req.trigger_labels,
        arguments: req.argument_labels,
    };
    let (job, ack) = {
        let mut guard = app.lock();
        let s = guard.as_mut().ok_or_else(ApiError::not_ready)?;
        let before = s.status();
        let job = s.submit(&req.id, labels)?;
        let ack = LabelAck {
            id: req.id,
            round: before.round,
            completed: before.completed + 1,
            pending: before.pending - 1,
            round_advanced: job.is_some(),
        };
        (job, ack)
    };
    if let Some(job) = job {
        // train in the background; status reports `training` until published
        let app = app.clone();
        tokio::task::spawn_blocking(move || {
            let outcome = job.run();
            let mut guard = app.lock();
            let s = guard.as_mut().expect("session installed");
            let res = match outcome {
                Ok(result) => s.publish(result),
                Err(e) => s.fail(&e),
            };
            if let Err(e) = res {
                error!("publishing round failed: {e}");
            }
        });
    }
    Ok(Json(ack))
}

async fn withdraw(State(app): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    let mut guard = app.lock();
    let s = guard.as_mut().ok_or_else(ApiError::not_ready)?;
    s.delete_last(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn authorize(State(app): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &app.token {
        if req.method() != Method::OPTIONS {
            let ok = req
                .headers()
                .get(header::AUTHORIZATION)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.strip_prefix("Bearer "))
                .is_some_and(|t| t == &**token);
            if !ok {
                return ApiError::new(StatusCode::UNAUTHORIZED, "missing or wrong bearer token").into_response();
            }
        }
    }
    next.run(req).await
}

pub fn router(app: AppState, cors_origin: Option<&str>) -> Router {
    let origin = match cors_origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(o) => AllowOrigin::exact(o),
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods([Method::GET, Method::POST, Method::DELETE])
        .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION]);
    Router::new()
        .route("/api/status", get(status))
        .route("/api/schema", get(schema))
        .route("/api/tasks", get(tasks))
        .route("/api/labels", post(submit))
        .route("/api/labels/{id}", delete(withdraw))
        .layer(middleware::from_fn_with_state(app.clone(), authorize))
        .layer(cors)
        .with_state(app)
}

/// Listen on `addr` right away and load the session in the background.
pub async fn serve(cfg: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let app = AppState::uninitialized(cfg.token.clone());
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!("listening on {}", listener.local_addr()?);
    let booting = app.clone();
    tokio::spawn(async move {
        if let Err(e) = booting.boot(cfg.experiment, cfg.state_dir).await {
            error!("failed to start session: {e}");
            std::process::exit(1);
        }
    });
    axum::serve(listener, router(app, cfg.cors_origin.as_deref())).await
}
