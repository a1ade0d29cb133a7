//! HTTP front end for a live prototype index.
//!
//! Queries take the index's read lock and mutations its write lock, so a
//! response always reflects a state before or after any single mutation.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use protoret::pipeline::Embedder;
use protoret::synth::decode_png;
use protoret::{BBox, Descriptor, Error, Prototype, PrototypeIndex, Result, SharedIndex};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    pub index_path: PathBuf,
    /// Bearer token required on every route except `/healthz`.
    pub token: Option<String>,
    pub read_only: bool,
    /// Minimum similarity for `/classify`.
    pub threshold: f64,
}

pub struct AppState {
    index: SharedIndex,
    embedder: Option<Embedder>,
    index_path: PathBuf,
    token: Option<String>,
    read_only: bool,
    threshold: f64,
    snapshotting: AtomicBool,
    snapshot_lock: tokio::sync::Mutex<()>,
}

impl AppState {
    pub fn new(config: &ServiceConfig, index: PrototypeIndex, embedder: Option<Embedder>) -> Arc<Self> {
        Arc::new(Self {
            index: SharedIndex::new(index),
            embedder,
            index_path: config.index_path.clone(),
            token: config.token.clone(),
            read_only: config.read_only,
            threshold: config.threshold,
            snapshotting: AtomicBool::new(false),
            snapshot_lock: tokio::sync::Mutex::new(()),
        })
    }

    pub fn index(&self) -> &SharedIndex {
        &self.index
    }

    /// Copies the index under the read lock, then writes the copy.
    /// Mutations arriving meanwhile are refused with 503.
    pub async fn snapshot(self: &Arc<Self>) -> Result<usize> {
        let _guard = self.snapshot_lock.lock().await;
        self.snapshotting.store(true, Ordering::SeqCst);
        let copy = self.index.snapshot();
        let path = self.index_path.clone();
        let count = copy.len();
        let written = tokio::task::spawn_blocking(move || copy.save(&path))
            .await
            .map_err(|e| Error::Invalid(format!("snapshot task: {e}")));
        self.snapshotting.store(false, Ordering::SeqCst);
        written??;
        Ok(count)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::DimensionMismatch { .. } | Error::NotNormalized { .. } | Error::ZeroVector => {
                StatusCode::CONFLICT
            }
            Error::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))
}

fn check_mutable(state: &AppState) -> ApiResult<()> {
    if state.read_only {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "service is read-only"));
    }
    if state.snapshotting.load(Ordering::SeqCst) {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "snapshot in progress"));
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AddBody {
    class: String,
    variant: String,
    descriptor: Vec<f32>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryBody {
    descriptor: Vec<f32>,
    #[serde(default = "default_k")]
    k: usize,
    #[serde(default = "default_threshold")]
    threshold: f64,
}

fn default_k() -> usize {
    5
}

fn default_threshold() -> f64 {
    -1.0
}

#[derive(Debug, Deserialize)]
struct RemoveParams {
    variant: Option<String>,
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "prototypes": state.index.read().len() }))
}

async fn add_prototype(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    check_mutable(&state)?;
    let body: AddBody = parse_json(&body)?;
    let mut p = Prototype::new(body.class, body.variant, Descriptor::from_f32(&body.descriptor));
    p.metadata = body.metadata;
    let count = {
        let mut index = state.index.write();
        index.add(p)?;
        index.len()
    };
    Ok((StatusCode::CREATED, Json(json!({ "prototypes": count }))).into_response())
}

async fn remove_prototypes(
    State(state): State<Arc<AppState>>,
    Path(class): Path<String>,
    Query(params): Query<RemoveParams>,
) -> ApiResult<Json<serde_json::Value>> {
    check_mutable(&state)?;
    let removed = state.index.write().remove(&class, params.variant.as_deref());
    Ok(Json(json!({ "removed": removed })))
}

async fn query(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let body: QueryBody = parse_json(&body)?;
    let desc = Descriptor::from_f32(&body.descriptor);
    let results = state.index.read().query(&desc, body.k, body.threshold)?;
    Ok(Json(serde_json::to_value(results).map_err(Error::from)?))
}

async fn classify(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    if state.embedder.is_none() {
        return Err(ApiError::new(StatusCode::NOT_IMPLEMENTED, "no head configured"));
    }
    let worker = state.clone();
    let best = tokio::task::spawn_blocking(move || -> Result<Option<(String, f64)>> {
        let embedder = worker.embedder.as_ref().expect("checked above");
        let img = decode_png(&body)?;
        let full = BBox::new(0.0, 0.0, img.width() as f64, img.height() as f64)?;
        let desc = embedder.describe("request", Some(&img), &full)?;
        worker.index.read().query_topclass(&desc, worker.threshold)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(match best {
        Some((class, similarity)) => Json(json!({ "class": class, "similarity": similarity })).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn snapshot(State(state): State<Arc<AppState>>) -> ApiResult<Json<serde_json::Value>> {
    if state.read_only {
        return Err(ApiError::new(StatusCode::FORBIDDEN, "service is read-only"));
    }
    let count = state.snapshot().await?;
    Ok(Json(json!({ "prototypes": count, "path": state.index_path })))
}

async fn authorize(State(state): State<Arc<AppState>>, request: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let ok = request
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .is_some_and(|t| t == token);
        if !ok {
            return ApiError::new(StatusCode::UNAUTHORIZED, "missing or bad bearer token").into_response();
        }
    }
    next.run(request).await
}

pub fn router(state: Arc<AppState>) -> Router {
    let guarded = Router::new()
        .route("/prototypes", post(add_prototype))
        .route("/prototypes/{class}", delete(remove_prototypes))
        .route("/query", post(query))
        .route("/classify", post(classify))
        .route("/snapshot", post(snapshot))
        .route_layer(middleware::from_fn_with_state(state.clone(), authorize));
    Router::new()
        .route("/healthz", get(healthz))
        .merge(guarded)
        .with_state(state)
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let terminate = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let terminate = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = terminate => {},
    }
}

/// Serves until SIGINT or SIGTERM, then writes a final snapshot unless read-only.
pub async fn serve(config: ServiceConfig, index: PrototypeIndex, embedder: Option<Embedder>) -> Result<()> {
    let state = AppState::new(&config, index, embedder);
    let addr = format!("{}:{}", config.bind, config.port);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|e| Error::Invalid(format!("bind {addr}: {e}")))?;
    tracing::info!(%addr, prototypes = state.index.read().len(), read_only = config.read_only, "listening");
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown_signal())
        .await
        .map_err(|e| Error::Invalid(format!("server: {e}")))?;
    if !config.read_only {
        let n = state.snapshot().await?;
        tracing::info!(prototypes = n, path = %config.index_path.display(), "final snapshot written");
    }
    Ok(())
}
