//! HTTP facade for the interactive training loop: upload a page, cluster a
//! window, name the clusters, preview the planes, save the model.
//!
//! All bodies are JSON except document uploads (raw PNG/JPEG bytes) and the
//! image/model downloads. Errors are `{code, message, details}`.

mod error;
mod session;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::{BytesRejection, JsonRejection};
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use chromaplane::io::{encode_gray_png, encode_png};
use chromaplane::model::Issue;
use chromaplane::segment::{extract_plane, Label, PlaneStyle};
use chromaplane::training::default_seed;
use chromaplane::{
    cluster_window, decode_image, lab_to_srgb, segment_image, ColorModel, Image, LabColor, LabelAssignment, Provenance, Rect,
    RetrainQueue, SegmentOptions,
};
use serde::{Deserialize, Serialize};
use tokio::sync::{Mutex, RwLock};

pub use error::{ApiError, ErrorBody};
pub use session::{document_id, Pending, QueuedDocument, Session, StoreError};

/// Upload size limit unless configured otherwise.
pub const DEFAULT_MAX_UPLOAD: usize = 64 * 1024 * 1024;
/// Previews are computed on a copy at most this wide.
pub const PREVIEW_MAX_WIDTH: u32 = 1000;

#[derive(Debug, Clone)]
pub struct Config {
    pub data_dir: PathBuf,
    pub max_upload_bytes: usize,
    /// Base for per-session seed counters.
    pub seed: u64,
}

impl Config {
    pub fn new(data_dir: impl Into<PathBuf>) -> Self {
        Self { data_dir: data_dir.into(), max_upload_bytes: DEFAULT_MAX_UPLOAD, seed: default_seed() }
    }
}

type SessionRef = Arc<RwLock<Session>>;

/// Shared server state: all sessions, each behind its own lock.
pub struct AppState {
    config: Config,
    sessions: Mutex<BTreeMap<String, SessionRef>>,
    next_session: AtomicU64,
}

impl AppState {
    /// Opens the data dir and reloads every persisted session.
    pub fn open(config: Config) -> Result<Arc<Self>, StoreError> {
        let root = config.data_dir.join("sessions");
        std::fs::create_dir_all(&root).map_err(|source| StoreError::Io { path: root.clone(), source })?;
        let mut sessions = BTreeMap::new();
        let mut max_n = 0;
        let listing = std::fs::read_dir(&root).map_err(|source| StoreError::Io { path: root.clone(), source })?;
        for entry in listing {
            let entry = entry.map_err(|source| StoreError::Io { path: root.clone(), source })?;
            let id = entry.file_name().to_string_lossy().into_owned();
            let Some(n) = id.strip_prefix('s').and_then(|n| n.parse::<u64>().ok()) else {
                continue;
            };
            max_n = max_n.max(n);
            let s = Session::open(id.clone(), entry.path())?;
            sessions.insert(id, Arc::new(RwLock::new(s)));
        }
        Ok(Arc::new(Self { config, sessions: Mutex::new(sessions), next_session: AtomicU64::new(max_n + 1) }))
    }

    async fn session(&self, id: &str) -> Result<SessionRef, ApiError> {
        self.sessions.lock().await.get(id).cloned().ok_or_else(|| ApiError::not_found("session", id))
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.config.data_dir.join("sessions").join(id)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = state.config.max_upload_bytes;
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{s}/documents", post(upload_document))
        .route("/sessions/{s}/documents/{d}/image", get(document_image))
        .route("/sessions/{s}/documents/{d}/cluster", post(cluster))
        .route("/sessions/{s}/pending/{p}/labels", post(commit_labels))
        .route("/sessions/{s}/preview/{d}", get(preview))
        .route("/sessions/{s}/model", get(get_model).put(put_model))
        .route("/sessions/{s}/retrain-queue", post(retrain_queue))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn serve(addr: SocketAddr, config: Config) -> std::io::Result<()> {
    let state = AppState::open(config).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("chromaplane-service listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

fn store_err(e: StoreError) -> ApiError {
    ApiError::internal(e)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> T + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)
}

#[derive(Debug, Serialize)]
struct SessionCreated {
    session: String,
    seed_base: u64,
}

async fn create_session(State(st): State<Arc<AppState>>) -> Result<(StatusCode, Json<SessionCreated>), ApiError> {
    let id = format!("s{}", st.next_session.fetch_add(1, Ordering::SeqCst));
    let dir = st.session_dir(&id);
    let seed = st.config.seed;
    let s = blocking(move || Session::create(id, dir, seed)).await?.map_err(store_err)?;
    let body = SessionCreated { session: s.id.clone(), seed_base: seed };
    st.sessions.lock().await.insert(s.id.clone(), Arc::new(RwLock::new(s)));
    Ok((StatusCode::CREATED, Json(body)))
}

#[derive(Debug, Serialize)]
struct DocumentCreated {
    id: String,
    width: u32,
    height: u32,
}

async fn upload_document(
    State(st): State<Arc<AppState>>,
    UrlPath(s): UrlPath<String>,
    body: Result<Bytes, BytesRejection>,
) -> Result<(StatusCode, Json<DocumentCreated>), ApiError> {
    let session = st.session(&s).await?;
    let bytes = body?;
    let id = document_id(&bytes);
    let mut guard = session.write().await;
    if let Some(img) = guard.document(&id) {
        return Ok((StatusCode::OK, Json(DocumentCreated { id, width: img.width(), height: img.height() })));
    }
    let decode_bytes = bytes.clone();
    let img = blocking(move || decode_image(&decode_bytes))
        .await?
        .map_err(|e| ApiError::bad_request(format!("undecodable document: {e}")))?;
    let (width, height) = img.dimensions();
    guard.add_document(&id, &bytes, img).map_err(store_err)?;
    Ok((StatusCode::CREATED, Json(DocumentCreated { id, width, height })))
}

async fn document_image(State(st): State<Arc<AppState>>, UrlPath((s, d)): UrlPath<(String, String)>) -> Result<Response, ApiError> {
    let session = st.session(&s).await?;
    let img = session.read().await.document(&d).cloned().ok_or_else(|| ApiError::not_found("document", &d))?;
    let png = blocking(move || encode_png(&img)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterRequest {
    rect: Rect,
    k: usize,
    #[serde(default)]
    seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Swatch {
    pub index: usize,
    pub lab: LabColor,
    pub hex: String,
    pub count: u64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterResponse {
    pub pending: String,
    pub doc: String,
    pub rect: Rect,
    pub k: usize,
    pub seed: u64,
    pub centroids: Vec<Swatch>,
    pub inertia: f64,
    pub iterations: usize,
}

async fn cluster(
    State(st): State<Arc<AppState>>,
    UrlPath((s, d)): UrlPath<(String, String)>,
    body: Result<Json<ClusterRequest>, JsonRejection>,
) -> Result<Json<ClusterResponse>, ApiError> {
    let session = st.session(&s).await?;
    let Json(req) = body?;
    let mut guard = session.write().await;
    let img = guard.document(&d).cloned().ok_or_else(|| ApiError::not_found("document", &d))?;
    let k_max = guard.model.config.k_max;
    if req.k == 0 || req.k > k_max {
        return Err(ApiError::unprocessable(format!("k = {} is outside 1..={k_max}", req.k))
            .with_details(serde_json::json!({ "k": req.k, "k_max": k_max })));
    }
    let rect = req.rect;
    if rect.w == 0 || rect.h == 0 || !rect.fits(img.width(), img.height()) {
        return Err(ApiError::unprocessable(format!(
            "rect {rect} does not fit the {}x{} image",
            img.width(),
            img.height()
        ))
        .with_details(serde_json::json!({ "rect": rect, "image": [img.width(), img.height()] })));
    }
    let seed = match req.seed {
        Some(seed) => seed,
        None => guard.take_seed(),
    };
    let cfg = guard.model.config.clone();
    let k = req.k;
    let result = blocking(move || cluster_window(&chromaplane::raster::window_points(&img, rect), k, seed, &cfg))
        .await?
        .map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let centroids = result
        .centroids
        .iter()
        .enumerate()
        .map(|(index, lab)| Swatch {
            index,
            lab: *lab,
            hex: lab_to_srgb(*lab).to_hex(),
            count: result.counts[index],
            radius: result.radii[index],
        })
        .collect();
    let (inertia, iterations) = (result.inertia, result.iterations);
    let pending = guard.add_pending(Pending { doc: d.clone(), rect, k, seed, result });
    guard.persist().map_err(store_err)?;
    Ok(Json(ClusterResponse { pending, doc: d, rect, k, seed, centroids, inertia, iterations }))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelsRequest {
    assignments: LabelAssignment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub label: String,
    pub centroids: usize,
    /// Swatch of the heaviest centroid.
    pub hex: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub classes: Vec<ClassSummary>,
    pub centroids: usize,
    pub windows: usize,
    pub fingerprint: String,
    pub warnings: Vec<Issue>,
}

impl ModelSummary {
    pub fn of(model: &ColorModel) -> Self {
        let classes = model
            .classes
            .iter()
            .map(|c| ClassSummary {
                label: c.label.clone(),
                centroids: c.centroids.len(),
                hex: c.centroids.iter().max_by_key(|e| e.weight).map_or_else(String::new, |e| lab_to_srgb(e.lab).to_hex()),
            })
            .collect();
        Self {
            classes,
            centroids: model.centroid_count(),
            windows: model.provenance.len(),
            fingerprint: model.fingerprint(),
            warnings: model.validate(),
        }
    }
}

async fn commit_labels(
    State(st): State<Arc<AppState>>,
    UrlPath((s, p)): UrlPath<(String, String)>,
    body: Result<Json<LabelsRequest>, JsonRejection>,
) -> Result<Json<ModelSummary>, ApiError> {
    let session = st.session(&s).await?;
    let mut guard = session.write().await;
    let pending = guard.pending(&p).cloned().ok_or_else(|| ApiError::not_found("pending result", &p))?;
    let Json(req) = body?;
    let win = Provenance { doc: pending.doc.clone(), rect: pending.rect, k: pending.k, seed: pending.seed };
    let next = guard
        .model
        .add_training_window(win, &pending.result, &req.assignments)
        .map_err(|e| ApiError::unprocessable(e.to_string()))?;
    guard.model = next;
    guard.consume_pending(&p);
    guard.persist().map_err(store_err)?;
    Ok(Json(ModelSummary::of(&guard.model)))
}

#[derive(Debug, Default, Deserialize)]
struct PreviewQuery {
    #[serde(default)]
    full: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreviewResponse {
    pub doc: String,
    pub width: u32,
    pub height: u32,
    /// Preview width over original width.
    pub scale: f64,
    pub histogram: BTreeMap<String, u64>,
    pub unknown_fraction: f64,
    pub flagged: bool,
    /// Label index -> class name; 255 is UNKNOWN.
    pub legend: BTreeMap<u8, String>,
    /// Grayscale PNG of raw label values, base64.
    pub label_map: String,
    /// Class name -> base64 PNG of that plane, original colors on white.
    pub planes: BTreeMap<String, String>,
}

fn downsample(img: &Image, max_width: u32) -> Image {
    if img.width() <= max_width {
        return img.clone();
    }
    let h = ((img.height() as u64 * max_width as u64 + img.width() as u64 / 2) / img.width() as u64).max(1) as u32;
    // Nearest neighbour keeps every preview pixel a real page color.
    image::imageops::resize(img, max_width, h, image::imageops::FilterType::Nearest)
}

fn render_preview(doc: String, model: &ColorModel, original: &Image, full: bool) -> Result<PreviewResponse, ApiError> {
    let img = if full { original.clone() } else { downsample(original, PREVIEW_MAX_WIDTH) };
    let r = segment_image(model, &img, &SegmentOptions::default()).map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let mut legend = chromaplane::pipeline::legend(model);
    legend.insert(Label::UNKNOWN.raw(), chromaplane::model::UNKNOWN_LABEL.to_string());
    let mut planes = BTreeMap::new();
    for (raw, name) in &legend {
        let label = Label::from_raw(*raw);
        if r.histogram.get(label) == 0 {
            continue;
        }
        let plane = extract_plane(&img, &r.labels, label, PlaneStyle::OriginalOnWhite).map_err(ApiError::internal)?;
        planes.insert(name.clone(), BASE64.encode(encode_png(&plane)));
    }
    Ok(PreviewResponse {
        doc,
        width: img.width(),
        height: img.height(),
        scale: img.width() as f64 / original.width() as f64,
        histogram: r.histogram.named(model),
        unknown_fraction: r.unknown_fraction,
        flagged: r.flagged,
        legend,
        label_map: BASE64.encode(encode_gray_png(&r.labels.to_gray())),
        planes,
    })
}

async fn preview(
    State(st): State<Arc<AppState>>,
    UrlPath((s, d)): UrlPath<(String, String)>,
    Query(q): Query<PreviewQuery>,
) -> Result<Json<PreviewResponse>, ApiError> {
    let session = st.session(&s).await?;
    let (img, model) = {
        let guard = session.read().await;
        let img = guard.document(&d).cloned().ok_or_else(|| ApiError::not_found("document", &d))?;
        (img, guard.model.clone())
    };
    if model.classes.iter().all(|c| c.centroids.is_empty()) {
        return Err(ApiError::conflict("the model has no classes yet; commit at least one training window first"));
    }
    let resp = blocking(move || render_preview(d, &model, &img, q.full)).await??;
    Ok(Json(resp))
}

async fn get_model(State(st): State<Arc<AppState>>, UrlPath(s): UrlPath<String>) -> Result<Response, ApiError> {
    let session = st.session(&s).await?;
    let bytes = session.read().await.model.serialize();
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

async fn put_model(
    State(st): State<Arc<AppState>>,
    UrlPath(s): UrlPath<String>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<ModelSummary>, ApiError> {
    let session = st.session(&s).await?;
    let bytes = body?;
    let model = ColorModel::deserialize(&bytes).map_err(|e| ApiError::unprocessable(e.to_string()))?;
    let errors: Vec<Issue> = model.validate().into_iter().filter(|i| i.severity == chromaplane::Severity::Error).collect();
    if !errors.is_empty() {
        return Err(ApiError::unprocessable("model failed validation")
            .with_details(serde_json::to_value(&errors).expect("issues serialize")));
    }
    let mut guard = session.write().await;
    guard.model = model;
    guard.persist().map_err(store_err)?;
    Ok(Json(ModelSummary::of(&guard.model)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueResponse {
    pub accepted: usize,
    /// False when the queue was produced by a different model than the session's.
    pub fingerprint_matches: bool,
    pub entries: Vec<QueuedDocument>,
}

async fn retrain_queue(
    State(st): State<Arc<AppState>>,
    UrlPath(s): UrlPath<String>,
    body: Result<Bytes, BytesRejection>,
) -> Result<Json<QueueResponse>, ApiError> {
    let session = st.session(&s).await?;
    let bytes = body?;
    let queue = RetrainQueue::parse(&bytes).map_err(|e| ApiError::unprocessable(format!("invalid retraining queue: {e}")))?;
    let mut guard = session.write().await;
    let fingerprint_matches = queue.model_fingerprint == guard.model.fingerprint();
    let entries: Vec<QueuedDocument> = queue.entries.iter().map(QueuedDocument::from).collect();
    guard.queue = entries.clone();
    guard.persist().map_err(store_err)?;
    Ok(Json(QueueResponse { accepted: entries.len(), fingerprint_matches, entries }))
}
