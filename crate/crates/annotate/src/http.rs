//! HTTP+JSON front end.
//!
//! | method | path                 | body / query          | reply             |
//! |--------|----------------------|-----------------------|-------------------|
//! | GET    | `/task?labeler=ID`   |                       | `AnnotationTask`  |
//! | POST   | `/submit`            | `SubmissionPayload`   | `SubmissionAck`   |
//! | GET    | `/progress`          |                       | `Progress`        |
//! | GET    | `/image/{image_id}`  |                       | redirect or bytes |
//! | POST   | `/labelers`          | `{"labeler_id": ID}`  | `201` / `200`     |
//!
//! Errors reply `{"schema_version": 1, "error": Name, "message": …}`.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Redirect, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use sift_core::store::{PreferenceStore, StoreError};
use tower_http::services::ServeDir;

use crate::board::{BoardError, SubmissionPayload, TaskBoard, SCHEMA_VERSION};
use crate::clock::{Clock, SystemClock};
use crate::config::ServiceConfig;

#[derive(Clone)]
pub struct AppState {
    board: Arc<Mutex<TaskBoard>>,
    /// Relative image paths resolve against this directory.
    image_root: PathBuf,
}

impl AppState {
    pub fn new(board: TaskBoard, image_root: impl Into<PathBuf>) -> Self {
        AppState {
            board: Arc::new(Mutex::new(board)),
            image_root: image_root.into(),
        }
    }

    /// Runs `f` on the board off the async executor; store appends sync to
    /// disk.
    async fn with_board<T: Send + 'static>(
        &self,
        f: impl FnOnce(&mut TaskBoard) -> T + Send + 'static,
    ) -> T {
        let board = self.board.clone();
        tokio::task::spawn_blocking(move || f(&mut board.lock().expect("board lock")))
            .await
            .expect("board task panicked")
    }

    pub fn board(&self) -> Arc<Mutex<TaskBoard>> {
        self.board.clone()
    }
}

#[derive(Serialize)]
struct ErrorBody {
    schema_version: u32,
    error: &'static str,
    message: String,
}

struct ApiError(StatusCode, &'static str, String);

impl From<BoardError> for ApiError {
    fn from(e: BoardError) -> Self {
        let status = match &e {
            BoardError::UnknownLabeler(_) => StatusCode::FORBIDDEN,
            BoardError::UnknownTask(_) | BoardError::NoTasksRemaining(_) => StatusCode::NOT_FOUND,
            BoardError::LeaseExpired { .. } => StatusCode::CONFLICT,
            BoardError::SchemaVersionMismatch { .. } | BoardError::InvalidId(_) => {
                StatusCode::BAD_REQUEST
            }
            BoardError::Store(StoreError::Io(_)) => StatusCode::INTERNAL_SERVER_ERROR,
            BoardError::Store(_) => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError(status, e.name(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            schema_version: SCHEMA_VERSION,
            error: self.1,
            message: self.2,
        };
        (self.0, Json(body)).into_response()
    }
}

#[derive(Deserialize)]
struct TaskQuery {
    labeler: String,
}

async fn get_task(
    State(state): State<AppState>,
    Query(q): Query<TaskQuery>,
) -> Result<Response, ApiError> {
    let task = state.with_board(move |b| b.next_task(&q.labeler)).await?;
    Ok(Json(task).into_response())
}

async fn post_submit(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let payload: SubmissionPayload = serde_json::from_slice(&body).map_err(|e| {
        ApiError(StatusCode::BAD_REQUEST, "MalformedPayload", e.to_string())
    })?;
    let ack = state.with_board(move |b| b.submit(payload)).await?;
    Ok(Json(ack).into_response())
}

async fn get_progress(State(state): State<AppState>) -> Response {
    Json(state.with_board(|b| b.progress()).await).into_response()
}

#[derive(Deserialize)]
struct LabelerBody {
    labeler_id: String,
}

async fn post_labeler(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let req: LabelerBody = serde_json::from_slice(&body).map_err(|e| {
        ApiError(StatusCode::BAD_REQUEST, "MalformedPayload", e.to_string())
    })?;
    let created = state
        .with_board(move |b| b.register_labeler(&req.labeler_id))
        .await?;
    let status = if created {
        StatusCode::CREATED
    } else {
        StatusCode::OK
    };
    Ok((
        status,
        Json(serde_json::json!({ "schema_version": SCHEMA_VERSION })),
    )
        .into_response())
}

async fn get_image(
    State(state): State<AppState>,
    UrlPath(image_id): UrlPath<String>,
) -> Result<Response, ApiError> {
    let id = image_id.clone();
    let uri = state
        .with_board(move |b| b.store().dataset().image(&id).map(|i| i.uri.clone()))
        .await
        .ok_or_else(|| BoardError::UnknownTask(image_id.clone()))?;
    if uri.starts_with("http://") || uri.starts_with("https://") {
        return Ok(Redirect::temporary(&uri).into_response());
    }
    let path = Path::new(uri.strip_prefix("file://").unwrap_or(&uri));
    let path = if path.is_absolute() {
        path.to_path_buf()
    } else {
        state.image_root.join(path)
    };
    let bytes = tokio::fs::read(&path).await.map_err(|e| {
        ApiError(
            StatusCode::NOT_FOUND,
            "ImageUnavailable",
            format!("{}: {e}", path.display()),
        )
    })?;
    let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
        Some(e) if e == "jpg" || e == "jpeg" => "image/jpeg",
        Some(e) if e == "png" => "image/png",
        Some(e) if e == "gif" => "image/gif",
        Some(e) if e == "webp" => "image/webp",
        _ => "application/octet-stream",
    };
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

pub fn router(state: AppState, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/task", get(get_task))
        .route("/submit", post(post_submit))
        .route("/progress", get(get_progress))
        .route("/image/{image_id}", get(get_image))
        .route("/labelers", post(post_labeler))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Opens (or creates) the store and serves until Ctrl-C.
pub async fn serve(config: ServiceConfig) -> Result<(), ServeError> {
    config.validate().map_err(|e| ServeError::Config(e.to_string()))?;
    let store = if config.store_path.exists() {
        PreferenceStore::open(&config.store_path)?
    } else {
        PreferenceStore::create(&config.store_path, "default")?
    };
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let mut board = TaskBoard::new(
        store,
        clock,
        chrono::Duration::seconds(config.lease_ttl_secs as i64),
        config.replication,
        config.shuffle_seed,
    );
    for l in &config.labelers {
        board
            .register_labeler(l)
            .map_err(|e| ServeError::Config(e.to_string()))?;
    }
    let image_root = config
        .store_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let app = router(AppState::new(board, image_root), config.ui_dir.as_deref());
    let addr: SocketAddr = format!("{}:{}", config.bind, config.port)
        .parse()
        .map_err(|e| ServeError::Config(format!("bind address: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("InvalidConfig: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
}

impl ServeError {
    pub fn name(&self) -> &'static str {
        match self {
            ServeError::Config(_) => "InvalidConfig",
            ServeError::Store(e) => e.name(),
            ServeError::Io(_) => "Io",
        }
    }
}
