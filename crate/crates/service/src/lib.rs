//! HTTP facade over edit propagation and diverse sampling.
//!
//! Routes:
//! - `POST /session` with a PNG body: `{session_id, grid_w, grid_h, width, height}`
//! - `GET /session/{id}`: session info and its factorization count
//! - `POST /session/{id}/colorize` with an edit set: base64 PNG plus solve stats
//! - `POST /session/{id}/diverse` with `{n, seed?}`: up to 8 samples plus diversity
//! - `GET /session/{id}/similarity_row?p=`: one row of the similarity matrix
//!
//! Everything else falls through to the static asset directory when one is
//! configured. Request and response schemas live in `docs/`.

pub mod error;
pub mod session;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderValue, Method};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use gcrf_core::edits::{EditSet, PropagateConfig};
use gcrf_core::image::{ColorFieldLab, GrayImage, RgbImage};
use gcrf_core::io::{decode_png, encode_png};
use gcrf_core::metrics::{diversity, SampleSet};
use gcrf_core::pipeline::{sample_diverse, SampleOptions, ToyModel};
use serde::{Deserialize, Serialize};
use tower_http::cors::{AllowOrigin, CorsLayer};
use tower_http::services::ServeDir;

pub use error::ServiceError;
pub use session::{Session, SessionStore};

/// Largest accepted upload.
pub const MAX_UPLOAD_BYTES: usize = 8 * 1024 * 1024;
/// Largest accepted image side, which bounds decode memory.
pub const MAX_IMAGE_SIDE: usize = 4096;
/// Largest `n` for `/diverse`.
pub const MAX_DIVERSE: usize = 8;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub propagate: PropagateConfig,
    pub max_sessions: usize,
    /// Origins allowed by CORS; empty allows any origin.
    pub cors_origins: Vec<String>,
    pub static_dir: Option<PathBuf>,
    pub model: Option<Arc<ToyModel>>,
    /// Seed for `/diverse` requests that do not carry their own.
    pub sample_seed: u64,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            propagate: PropagateConfig::default(),
            max_sessions: 64,
            cors_origins: Vec::new(),
            static_dir: None,
            model: None,
            sample_seed: 0,
        }
    }
}

pub struct AppState {
    pub config: ServiceConfig,
    pub sessions: SessionStore,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        let sessions = SessionStore::new(config.max_sessions);
        Arc::new(Self { config, sessions })
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let cors = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
        .allow_headers([header::CONTENT_TYPE])
        .expose_headers([header::HeaderName::from_static("x-cache")])
        .allow_origin(if state.config.cors_origins.is_empty() {
            AllowOrigin::any()
        } else {
            AllowOrigin::list(
                state
                    .config
                    .cors_origins
                    .iter()
                    .filter_map(|o| HeaderValue::from_str(o).ok()),
            )
        });
    let mut app = Router::new()
        .route("/session", post(create_session))
        .route("/session/{id}", get(session_info))
        .route("/session/{id}/colorize", post(colorize))
        .route("/session/{id}/diverse", post(diverse))
        .route("/session/{id}/similarity_row", get(similarity_row));
    if let Some(dir) = &state.config.static_dir {
        app = app.fallback_service(ServeDir::new(dir));
    }
    app.layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .layer(cors)
        .with_state(state)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub grid_w: usize,
    pub grid_h: usize,
    pub width: usize,
    pub height: usize,
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<SessionCreated>, ServiceError> {
    let rgb = decode_png(&body).map_err(|e| ServiceError::BadRequest(format!("not a readable PNG: {e}")))?;
    if rgb.width > MAX_IMAGE_SIDE || rgb.height > MAX_IMAGE_SIDE {
        return Err(ServiceError::BadRequest(format!(
            "image is {}x{}; sides are limited to {MAX_IMAGE_SIDE}",
            rgb.width, rgb.height
        )));
    }
    let (gray, _) = rgb.to_lab();
    let id = state.sessions.next_id(&body);
    let st = Arc::clone(&state);
    let session = blocking(move || Ok(Session::new(id, &gray, &st.config.propagate)?)).await?;
    let (grid_w, grid_h) = session.scene.grid_size();
    let out = SessionCreated {
        session_id: session.id.clone(),
        grid_w,
        grid_h,
        width: session.scene.native.width(),
        height: session.scene.native.height(),
    };
    state.sessions.insert(session);
    Ok(Json(out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub grid_w: usize,
    pub grid_h: usize,
    pub width: usize,
    pub height: usize,
    pub factorizations: usize,
    pub age_ms: u128,
    pub idle_ms: u128,
}

async fn session_info(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionInfo>, ServiceError> {
    let s = state.sessions.get(&id)?;
    let (grid_w, grid_h) = s.scene.grid_size();
    Ok(Json(SessionInfo {
        session_id: s.id.clone(),
        grid_w,
        grid_h,
        width: s.scene.native.width(),
        height: s.scene.native.height(),
        factorizations: s.factorizations(),
        age_ms: s.created.elapsed().as_millis(),
        idle_ms: s.last_used().elapsed().as_millis(),
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    /// Largest relative residual of the two channel solves.
    pub residual: f64,
    /// `|H|`, the number of constrained grid pixels.
    pub revealed: usize,
    pub beta: f64,
    pub solve_ms: f64,
    /// Pixels whose color fell outside the sRGB gamut and was clamped.
    pub clamped_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorizeResponse {
    /// Base64 PNG at the uploaded resolution.
    pub image_png: String,
    pub width: usize,
    pub height: usize,
    pub cache_hit: bool,
    /// Factorizations performed by this session so far.
    pub factorizations: usize,
    pub stats: SolveStats,
}

fn png_base64(gray: &GrayImage, color: &ColorFieldLab) -> Result<(String, usize), ServiceError> {
    let (rgb, clamped) = RgbImage::from_lab(gray, color)?;
    Ok((BASE64.encode(encode_png(&rgb)?), clamped))
}

async fn colorize(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Result<Response, ServiceError> {
    let session = state.sessions.get(&id)?;
    let text = std::str::from_utf8(&body).map_err(|_| ServiceError::BadRequest("body is not UTF-8".into()))?;
    let edits = EditSet::from_json(text)?;
    if edits.edits.is_empty() {
        return Err(ServiceError::EmptyEdits);
    }
    let out = blocking(move || {
        let start = Instant::now();
        let (w, h) = session.scene.grid_size();
        let c = edits.to_constraints(w, h)?;
        let (sys, cache_hit) = session.system_for(&c)?;
        let (a, ra) = sys.solve_rhs(&c.rhs(&c.target_a))?;
        let (b, rb) = sys.solve_rhs(&c.rhs(&c.target_b))?;
        let solve_ms = start.elapsed().as_secs_f64() * 1e3;
        let field = ColorFieldLab::from_scaled(w, h, &a, &b)?.resample(session.scene.native.width(), session.scene.native.height())?;
        let (image_png, clamped_pixels) = png_base64(&session.scene.native, &field)?;
        Ok(ColorizeResponse {
            image_png,
            width: field.width,
            height: field.height,
            cache_hit,
            factorizations: session.factorizations(),
            stats: SolveStats {
                residual: ra.max(rb),
                revealed: c.active(),
                beta: c.beta,
                solve_ms,
                clamped_pixels,
            },
        })
    })
    .await?;
    let tag = if out.cache_hit { "hit" } else { "miss" };
    Ok(([(header::HeaderName::from_static("x-cache"), tag)], Json(out)).into_response())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiverseRequest {
    pub n: usize,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiverseResponse {
    pub images: Vec<String>,
    pub width: usize,
    pub height: usize,
    /// Mean per-pixel chroma variance across samples; 0 for a single one.
    pub variance: f64,
    /// Mean SSIM over sample pairs; absent for a single sample.
    pub mean_pairwise_ssim: Option<f64>,
    pub max_residual: f64,
}

async fn diverse(State(state): State<Arc<AppState>>, Path(id): Path<String>, body: Bytes) -> Result<Json<DiverseResponse>, ServiceError> {
    let session = state.sessions.get(&id)?;
    let model = state.config.model.clone().ok_or(ServiceError::NoModel)?;
    let req: DiverseRequest = serde_json::from_slice(&body).map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    if req.n == 0 || req.n > MAX_DIVERSE {
        return Err(ServiceError::BadRequest(format!("n must be in 1..={MAX_DIVERSE}, got {}", req.n)));
    }
    let seed = req.seed.unwrap_or(state.config.sample_seed);
    let out = blocking(move || {
        let opts = SampleOptions {
            seed,
            ..SampleOptions::default()
        };
        let gray = &session.scene.native;
        let drawn = sample_diverse(&model, gray, req.n, &opts)?;
        let (variance, mean_pairwise_ssim) = if drawn.samples.len() >= 2 {
            let set = SampleSet::new(drawn.samples.clone(), drawn.samples[0].clone())?;
            let d = diversity(&set)?;
            (d.variance, Some(d.mean_pairwise_ssim))
        } else {
            (0.0, None)
        };
        let images = drawn
            .samples
            .iter()
            .map(|f| png_base64(gray, f).map(|(png, _)| png))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(DiverseResponse {
            images,
            width: gray.width(),
            height: gray.height(),
            variance,
            mean_pairwise_ssim,
            max_residual: drawn.max_residual,
        })
    })
    .await?;
    Ok(Json(out))
}

#[derive(Debug, Deserialize)]
pub struct RowQuery {
    pub p: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub p: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    /// Row `p` of the similarity matrix, grid pixels in row-major order.
    pub row: Vec<f64>,
}

async fn similarity_row(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<RowQuery>,
) -> Result<Json<SimilarityRow>, ServiceError> {
    let session = state.sessions.get(&id)?;
    let p = q.p.ok_or_else(|| ServiceError::BadRequest("query parameter p is required".into()))?;
    let pixels = session.scene.similarity.pixel_count();
    if p >= pixels {
        return Err(ServiceError::PixelOutOfRange { p, pixels });
    }
    let (grid_w, grid_h) = session.scene.grid_size();
    Ok(Json(SimilarityRow {
        p,
        grid_w,
        grid_h,
        row: session.scene.similarity.row(p),
    }))
}
