//! HTTP front end of the annotation store.
//!
//! All mutations go through one store behind a mutex, so the event log has a
//! single writer and concurrent lease requests cannot hand out the same task.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ragcurate_core::annotate::{AnnotationStore, StoreConfig};
use ragcurate_core::{load_corpus, Error};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

use crate::{CliResult, ServeArgs};

#[derive(Clone)]
pub struct AppState {
    store: Arc<Mutex<AnnotationStore>>,
    default_lease: u64,
}

impl AppState {
    pub fn new(store: AnnotationStore, default_lease: u64) -> Self {
        AppState {
            store: Arc::new(Mutex::new(store)),
            default_lease,
        }
    }

    fn with_store<T>(&self, f: impl FnOnce(&mut AnnotationStore) -> ragcurate_core::Result<T>) -> Result<T, ApiError> {
        let mut store = self
            .store
            .lock()
            .map_err(|_| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "store lock poisoned".into()))?;
        f(&mut store).map_err(ApiError::from)
    }
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::UnknownTask(_) | Error::UnknownRecord(_) => StatusCode::NOT_FOUND,
            Error::NotLeased { .. } => StatusCode::CONFLICT,
            Error::InvalidLabel(_) => StatusCode::UNPROCESSABLE_ENTITY,
            Error::InvalidConfig(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

#[derive(Debug, Deserialize)]
pub struct NextQuery {
    pub annotator: String,
    pub lease: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LabelRequest {
    pub record_id: String,
    /// Kept wide so out-of-range values reach the store and get a 422.
    pub h: i64,
    pub annotator: String,
}

async fn next_task(State(app): State<AppState>, Query(q): Query<NextQuery>) -> Result<Response, ApiError> {
    if q.annotator.trim().is_empty() {
        return Err(ApiError(StatusCode::BAD_REQUEST, "annotator must not be empty".into()));
    }
    let lease = q.lease.unwrap_or(app.default_lease);
    match app.with_store(|s| s.lease_next(&q.annotator, lease))? {
        Some(task) => Ok(Json(task).into_response()),
        None => Ok(StatusCode::NO_CONTENT.into_response()),
    }
}

async fn submit_label(State(app): State<AppState>, Json(req): Json<LabelRequest>) -> Result<Response, ApiError> {
    let revision = app.with_store(|s| s.submit_label(&req.record_id, req.h, &req.annotator))?;
    Ok(Json(json!({ "record_id": req.record_id, "h": req.h, "revision": revision })).into_response())
}

async fn progress(State(app): State<AppState>) -> Result<Response, ApiError> {
    Ok(Json(app.with_store(|s| Ok(s.progress()))?).into_response())
}

async fn export(State(app): State<AppState>) -> Result<Response, ApiError> {
    Ok(Json(app.with_store(|s| Ok(s.export_labels()))?).into_response())
}

async fn task(State(app): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    app.with_store(|s| s.task(&id).ok_or(Error::UnknownTask(id.clone())))
        .map(|t| Json(t).into_response())
}

async fn expire(State(app): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    app.with_store(|s| {
        s.expire_lease(&id)?;
        s.task(&id).ok_or(Error::UnknownTask(id.clone()))
    })
    .map(|t| Json(t).into_response())
}

pub fn router(app: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/tasks/next", get(next_task))
        .route("/api/tasks/{id}", get(task))
        .route("/api/tasks/{id}/expire", post(expire))
        .route("/api/labels", post(submit_label))
        .route("/api/progress", get(progress))
        .route("/api/export", get(export))
        .with_state(app);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Opens the store, imports the selection and serves until interrupted.
pub fn run(args: &ServeArgs) -> CliResult<()> {
    let corpus = load_corpus(&args.corpus)?;
    let config = StoreConfig {
        allow_relabel: !args.no_relabel,
        ..StoreConfig::default()
    };
    let mut store = AnnotationStore::open(&args.store, config)?;
    let tasks = store.import_tasks(&args.selection, &corpus)?;

    let runtime = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
    runtime.block_on(async {
        let addr = format!("{}:{}", args.host, args.port);
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .map_err(|e| Error::io(&addr, e))?;
        let local: SocketAddr = listener.local_addr().map_err(|e| Error::io(&addr, e))?;
        println!("listening on http://{local} with {tasks} tasks");
        let app = router(AppState::new(store, args.lease_seconds), args.ui_dir.clone());
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Error::io(&addr, e))?;
        Ok(())
    })
}
