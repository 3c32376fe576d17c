//! HTTP inference service for the studio front end.
//!
//! Routes:
//!
//! | method | path                            | body                          |
//! |--------|---------------------------------|-------------------------------|
//! | POST   | `/api/sessions`                 | page raster (PNG or JPEG)     |
//! | PUT    | `/api/sessions/{id}/hints`      | hint document (JSON)          |
//! | PUT    | `/api/sessions/{id}/reference`  | reference raster              |
//! | POST   | `/api/sessions/{id}/colorize`   | `{lambda_ab, deterministic, seed}` |
//! | POST   | `/api/sessions/{id}/blend`      | `{lambda_ab}`                 |
//! | GET    | `/api/sessions/{id}`            |                               |
//! | GET    | `/api/health`                   |                               |
//!
//! Rasters in responses are base64 PNG. `colorize` caches `x_g`, `x_col` and
//! the generator output keyed on (hints digest, reference digest, seed,
//! deterministic); `blend` only re-runs the chroma blend on that cache and
//! answers 409 when hints or reference changed since.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tokio::sync::{Mutex, Semaphore};

use crate::colorspace::{BlendWeight, ImagePlane, ImageStack, ValueRange};
use crate::data::{HintDocument, HintSet};
use crate::error::Error;
use crate::generator::Generator;
use crate::pipeline::{colorize, finish, InferenceRequest, Priors};
use crate::raster;

pub const THUMBNAIL_SIDE: usize = 256;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_upload_bytes: usize,
    /// Concurrent generator forwards.
    pub workers: usize,
    pub session_ttl: Duration,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            max_upload_bytes: 32 * 1024 * 1024,
            workers: 2,
            session_ttl: Duration::from_secs(3600),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct CacheKey {
    hints: String,
    reference: String,
    seed: u64,
    deterministic: bool,
}

#[derive(Debug, Clone)]
struct StageCache {
    key: CacheKey,
    x_g: ImagePlane,
    x_col: ImageStack,
    y_hat: ImageStack,
}

#[derive(Debug)]
struct Session {
    page: ImagePlane,
    hints: HintSet,
    reference: Option<(ImageStack, String)>,
    cache: Option<StageCache>,
    last_lambda: Option<f64>,
    created: Instant,
    touched: Instant,
}

impl Session {
    fn hints_digest(&self) -> String {
        self.hints.digest()
    }

    fn reference_digest(&self) -> String {
        self.reference.as_ref().map(|(_, d)| d.clone()).unwrap_or_default()
    }

    fn cache_valid(&self) -> bool {
        self.cache.as_ref().is_some_and(|c| {
            c.key.hints == self.hints_digest() && c.key.reference == self.reference_digest()
        })
    }
}

/// Shared service state: the model, priors, sessions and counters.
pub struct AppState {
    model: Arc<Generator>,
    priors: Priors,
    config: ServiceConfig,
    sessions: std::sync::Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    workers: Arc<Semaphore>,
    forwards: AtomicU64,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(model: Generator, priors: Priors, config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            model: Arc::new(model),
            priors,
            workers: Arc::new(Semaphore::new(config.workers.max(1))),
            config,
            sessions: std::sync::Mutex::new(HashMap::new()),
            forwards: AtomicU64::new(0),
            next_id: AtomicU64::new(1),
        })
    }

    /// Number of generator forwards run so far.
    pub fn forward_count(&self) -> u64 {
        self.forwards.load(Ordering::SeqCst)
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map").len()
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .lock()
            .expect("session map")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))
    }

    fn purge_idle(&self) {
        let ttl = self.config.session_ttl;
        self.sessions.lock().expect("session map").retain(|_, s| match s.try_lock() {
            Ok(s) => s.touched.elapsed() < ttl,
            Err(_) => true,
        });
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

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidHint { .. } | Error::Contract(_) | Error::Shape(_) | Error::Image(_) | Error::Json(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            Error::Prior { .. } => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

fn b64_png(img: &ImageStack) -> Result<String, ApiError> {
    Ok(base64::engine::general_purpose::STANDARD.encode(raster::encode_stack_png(img)?))
}

fn b64_png_plane(img: &ImagePlane) -> Result<String, ApiError> {
    Ok(base64::engine::general_purpose::STANDARD.encode(raster::encode_plane_png(img)?))
}

fn thumb_dims(h: usize, w: usize) -> (usize, usize) {
    let side = h.max(w);
    if side <= THUMBNAIL_SIDE {
        return (h, w);
    }
    let s = THUMBNAIL_SIDE as f64 / side as f64;
    (((h as f64 * s).round() as usize).max(1), ((w as f64 * s).round() as usize).max(1))
}

fn thumb_stack(img: &ImageStack) -> Result<String, ApiError> {
    let (h, w) = thumb_dims(img.height(), img.width());
    b64_png(&raster::resize_stack(&img.to_range(ValueRange::Unit)?, h, w)?)
}

fn thumb_plane(img: &ImagePlane) -> Result<String, ApiError> {
    let (h, w) = thumb_dims(img.height(), img.width());
    b64_png_plane(&raster::resize_plane(&img.to_range(ValueRange::Unit)?, h, w)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionCreated {
    pub id: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ack {
    pub id: String,
    pub cache_valid: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColorizeBody {
    #[serde(default = "default_lambda")]
    pub lambda_ab: f64,
    #[serde(default = "default_true")]
    pub deterministic: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_lambda() -> f64 {
    BlendWeight::default().get()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlendBody {
    pub lambda_ab: f64,
}

/// Which inputs a result was computed from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub hints_digest: String,
    pub reference_digest: String,
    pub seed: u64,
    pub deterministic: bool,
    pub lambda_ab: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageThumbnails {
    pub x_g: String,
    pub x_col: String,
    pub y_hat: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColorizeResponse {
    /// Full-size output, base64 PNG.
    pub y: String,
    pub stages: StageThumbnails,
    pub provenance: Provenance,
    /// True when the stages came from the cache rather than a new forward.
    pub cached: bool,
    pub clipped: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlendResponse {
    pub y: String,
    pub provenance: Provenance,
    pub clipped: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionStatus {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub hints: usize,
    pub has_reference: bool,
    pub cache_valid: bool,
    pub last_lambda: Option<f64>,
    pub age_secs: f64,
    pub idle_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub sessions: usize,
    pub forwards: u64,
}

fn weight(lambda_ab: f64) -> Result<BlendWeight, ApiError> {
    BlendWeight::new(lambda_ab).map_err(|e| ApiError::unprocessable(e.to_string()))
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> ApiResult<SessionCreated> {
    app.purge_idle();
    let page = raster::decode_plane(&body).map_err(|e| ApiError::unprocessable(format!("page: {e}")))?;
    let (height, width) = page.dims();
    app.model.config().check_dims(height, width)?;
    let hints = HintSet::empty(width as u32, height as u32)?;
    let id = format!("s{:06}", app.next_id.fetch_add(1, Ordering::SeqCst));
    let now = Instant::now();
    let session = Session {
        page,
        hints,
        reference: None,
        cache: None,
        last_lambda: None,
        created: now,
        touched: now,
    };
    app.sessions
        .lock()
        .expect("session map")
        .insert(id.clone(), Arc::new(Mutex::new(session)));
    Ok(Json(SessionCreated { id, width, height }))
}

async fn put_hints(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Ack> {
    let session = app.session(&id)?;
    let doc: HintDocument =
        serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(format!("hint document: {e}")))?;
    let hints = HintSet::from_document(doc).map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let mut s = session.lock().await;
    let (h, w) = s.page.dims();
    if (hints.width() as usize, hints.height() as usize) != (w, h) {
        return Err(ApiError::unprocessable(format!(
            "hint page {}x{} does not match session page {w}x{h}",
            hints.width(),
            hints.height()
        )));
    }
    s.hints = hints;
    s.cache = None;
    s.touched = Instant::now();
    Ok(Json(Ack {
        id,
        cache_valid: false,
    }))
}

async fn put_reference(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Ack> {
    let session = app.session(&id)?;
    let img = raster::decode_stack(&body).map_err(|e| ApiError::unprocessable(format!("reference: {e}")))?;
    let digest = hex::encode(Sha256::digest(&body));
    let mut s = session.lock().await;
    s.reference = Some((img, digest));
    s.cache = None;
    s.touched = Instant::now();
    Ok(Json(Ack {
        id,
        cache_valid: false,
    }))
}

async fn post_colorize(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<ColorizeResponse> {
    let session = app.session(&id)?;
    let req: ColorizeBody = if body.is_empty() {
        serde_json::from_str("{}").expect("defaults")
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(e.to_string()))?
    };
    let lambda = weight(req.lambda_ab)?;
    let mut s = session.lock().await;
    let key = CacheKey {
        hints: s.hints_digest(),
        reference: s.reference_digest(),
        seed: req.seed,
        deterministic: req.deterministic,
    };
    let reuse = s.cache.as_ref().is_some_and(|c| c.key == key);
    if !reuse {
        let mut inference = InferenceRequest::new(s.page.clone());
        inference.hints = Some(s.hints.clone());
        inference.reference = s.reference.as_ref().map(|(r, _)| r.clone());
        inference.lambda_ab = lambda;
        inference.deterministic = req.deterministic;
        inference.seed = req.seed;
        let permit = app.workers.clone().acquire_owned().await.expect("worker pool open");
        let model = app.model.clone();
        let priors = app.priors.clone();
        app.forwards.fetch_add(1, Ordering::SeqCst);
        let out = tokio::task::spawn_blocking(move || {
            let _permit = permit;
            colorize(&inference, &priors, &model)
        })
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
        s.cache = Some(StageCache {
            key: key.clone(),
            x_g: out.x_g,
            x_col: out.x_col,
            y_hat: out.y_hat,
        });
    }
    let cache = s.cache.as_ref().expect("cache populated");
    let mapped = finish(&cache.y_hat, &cache.x_col, lambda)?;
    let resp = ColorizeResponse {
        y: b64_png(&mapped.image)?,
        stages: StageThumbnails {
            x_g: thumb_plane(&cache.x_g)?,
            x_col: thumb_stack(&cache.x_col)?,
            y_hat: thumb_stack(&cache.y_hat)?,
        },
        provenance: Provenance {
            stage: "colorize".into(),
            hints_digest: key.hints,
            reference_digest: key.reference,
            seed: key.seed,
            deterministic: key.deterministic,
            lambda_ab: lambda.get(),
        },
        cached: reuse,
        clipped: mapped.clipped,
    };
    s.last_lambda = Some(lambda.get());
    s.touched = Instant::now();
    Ok(Json(resp))
}

async fn post_blend(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<BlendResponse> {
    let session = app.session(&id)?;
    let req: BlendBody = serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let lambda = weight(req.lambda_ab)?;
    let mut s = session.lock().await;
    if !s.cache_valid() {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "no valid colorization for the current hints and reference; colorize first",
        ));
    }
    let cache = s.cache.as_ref().expect("valid cache");
    let mapped = finish(&cache.y_hat, &cache.x_col, lambda)?;
    let resp = BlendResponse {
        y: b64_png(&mapped.image)?,
        provenance: Provenance {
            stage: "blend".into(),
            hints_digest: cache.key.hints.clone(),
            reference_digest: cache.key.reference.clone(),
            seed: cache.key.seed,
            deterministic: cache.key.deterministic,
            lambda_ab: lambda.get(),
        },
        clipped: mapped.clipped,
    };
    s.last_lambda = Some(lambda.get());
    s.touched = Instant::now();
    Ok(Json(resp))
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<SessionStatus> {
    let session = app.session(&id)?;
    let s = session.lock().await;
    let (height, width) = s.page.dims();
    Ok(Json(SessionStatus {
        id,
        width,
        height,
        hints: s.hints.hints().len(),
        has_reference: s.reference.is_some(),
        cache_valid: s.cache_valid(),
        last_lambda: s.last_lambda,
        age_secs: s.created.elapsed().as_secs_f64(),
        idle_secs: s.touched.elapsed().as_secs_f64(),
    }))
}

async fn health(State(app): State<Arc<AppState>>) -> Json<Health> {
    Json(Health {
        sessions: app.session_count(),
        forwards: app.forward_count(),
    })
}

pub fn router(app: Arc<AppState>) -> Router {
    let limit = app.config.max_upload_bytes;
    Router::new()
        .route("/api/health", get(health))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/hints", put(put_hints))
        .route("/api/sessions/{id}/reference", put(put_reference))
        .route("/api/sessions/{id}/colorize", post(post_colorize))
        .route("/api/sessions/{id}/blend", post(post_blend))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(app)
}

/// Serves on an already bound listener until the future is dropped.
pub async fn serve(listener: tokio::net::TcpListener, app: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(app)).await
}

/// Binds `addr` and serves forever on a fresh runtime.
pub fn run(addr: SocketAddr, app: Arc<AppState>) -> crate::Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::io("tokio runtime", e))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Error::io(addr.to_string(), e))?;
        log::info!("listening on {}", listener.local_addr().map_err(|e| Error::io(addr.to_string(), e))?);
        serve(listener, app).await.map_err(|e| Error::io(addr.to_string(), e))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thumbnails_keep_aspect() {
        assert_eq!(thumb_dims(64, 128), (64, 128));
        assert_eq!(thumb_dims(512, 1024), (128, 256));
        assert_eq!(thumb_dims(1024, 256), (256, 64));
    }
}
