//! HTTP inference service over one loaded checkpoint.
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | POST | `/api/encode` | `{strokes}` | `{embedding}` |
//! | POST | `/api/reconstruct` | `{strokes}` | `{strokes}` |
//! | POST | `/api/interpolate` | `{a, b, steps?}` | `{frames}` |
//! | POST | `/api/classify` | `{strokes}` | `{class, label, probabilities}` |
//! | POST | `/api/retrieve` | `{strokes, k?}` | `{results: [{id, score}]}` |
//! | POST | `/api/perturb` | `{strokes, sigma, seed?}` | `{strokes}` |
//! | GET | `/api/config` | | model metadata |
//! | GET | `/api/health` | | `{status, digest}` |
//!
//! Strokes use the QuickDraw stroke-list form `[[[x…], [y…]], …]`. Errors
//! come back as `{"error": message, "field": name-or-null}` with status 400
//! (malformed request), 413 (body or sketch too large), 415 (not JSON),
//! 422 (the model produced no drawable output) or 503 (model not loaded yet,
//! or no retrieval index).

pub mod api;

use std::future::IntoFuture;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::header::CONTENT_TYPE;
use axum::http::{HeaderMap, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use serde_json::{Map, Value};
use sketchformer::embed::{EmbeddingDump, EmbeddingIndex, Metric, DEFAULT_INTERPOLATION_STEPS};
use sketchformer::pipeline::SketchModel;
use sketchformer::sketch::Sketch;
use sketchformer::tokenize::{Codebook, Tokenizer};
use sketchformer::Error;
use tower_http::cors::{AllowOrigin, CorsLayer};

/// Dump metadata key naming the checkpoint that produced the embeddings.
pub const DUMP_DIGEST_KEY: &str = "model.digest";

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub checkpoint: PathBuf,
    /// Optional stand-alone codebook; must match the one in the checkpoint.
    pub codebook: Option<PathBuf>,
    /// Sketch-space embedding dump served by `/api/retrieve`.
    pub index: Option<PathBuf>,
    pub metric: Metric,
    pub listen: SocketAddr,
    pub limits: Limits,
}

#[derive(Debug, Clone)]
pub struct Limits {
    pub max_body_bytes: usize,
    /// Sketches with more points than this are rejected with 413.
    pub max_points: usize,
    pub cors_origins: Vec<String>,
}

impl Default for Limits {
    fn default() -> Self {
        Limits {
            max_body_bytes: 1 << 20,
            max_points: 4096,
            cors_origins: vec!["http://localhost:5173".into(), "http://127.0.0.1:5173".into()],
        }
    }
}

impl ServiceConfig {
    pub fn new(checkpoint: impl Into<PathBuf>) -> Self {
        ServiceConfig {
            checkpoint: checkpoint.into(),
            codebook: None,
            index: None,
            metric: Metric::Cosine,
            listen: SocketAddr::from(([127, 0, 0, 1], 8080)),
            limits: Limits::default(),
        }
    }
}

/// Everything a request handler reads. Never mutated after loading.
#[derive(Debug)]
pub struct Loaded {
    pub model: SketchModel,
    pub index: Option<EmbeddingIndex>,
}

impl Loaded {
    pub fn new(model: SketchModel, index: Option<EmbeddingIndex>) -> sketchformer::Result<Self> {
        if let Some(i) = &index {
            if i.dim() != model.config().d_model {
                return Err(Error::Shape(format!(
                    "index has {}-dimensional embeddings, model produces {}",
                    i.dim(),
                    model.config().d_model
                )));
            }
        }
        Ok(Loaded { model, index })
    }

    /// Loads the checkpoint and optional index named in `config`.
    pub fn load(config: &ServiceConfig) -> sketchformer::Result<Self> {
        let model = SketchModel::load(&config.checkpoint)?;
        if let Some(path) = &config.codebook {
            let external = Codebook::load(path)?;
            match model.tokenizer() {
                Tokenizer::Dict { codebook } if codebook.digest() == external.digest() => {}
                Tokenizer::Dict { .. } => {
                    return Err(Error::Config(format!(
                        "{} is not the codebook the checkpoint was trained with",
                        path.display()
                    )))
                }
                other => {
                    return Err(Error::Config(format!(
                        "checkpoint uses the {} tokenizer but a codebook was given",
                        other.name()
                    )))
                }
            }
        }
        let index = match &config.index {
            Some(path) => {
                let dump = EmbeddingDump::load(path)?;
                if let Some(d) = dump.meta.get(DUMP_DIGEST_KEY) {
                    if d != model.digest() {
                        return Err(Error::Config(format!(
                            "{} was embedded with a different checkpoint",
                            path.display()
                        )));
                    }
                }
                Some(EmbeddingIndex::from_dump(&dump, config.metric)?)
            }
            None => None,
        };
        Self::new(model, index)
    }
}

#[derive(Debug, Clone)]
pub struct AppState {
    loaded: Arc<OnceLock<Arc<Loaded>>>,
    limits: Arc<Limits>,
}

impl AppState {
    /// A state whose model is still loading; inference answers 503.
    pub fn pending(limits: Limits) -> Self {
        AppState {
            loaded: Arc::new(OnceLock::new()),
            limits: Arc::new(limits),
        }
    }

    pub fn ready(loaded: Loaded, limits: Limits) -> Self {
        let s = Self::pending(limits);
        s.install(loaded);
        s
    }

    /// Publishes the model. Returns false if one was already installed.
    pub fn install(&self, loaded: Loaded) -> bool {
        self.loaded.set(Arc::new(loaded)).is_ok()
    }

    fn get(&self) -> Result<Arc<Loaded>, ApiError> {
        self.loaded
            .get()
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, None, "model is not loaded yet"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub field: Option<String>,
    #[serde(rename = "error")]
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, field: Option<&str>, message: impl Into<String>) -> Self {
        ApiError {
            status,
            field: field.map(str::to_string),
            message: message.into(),
        }
    }

    fn bad(field: &str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, Some(field), message)
    }

    fn from_core(e: Error, field: Option<&str>) -> Self {
        let status = match &e {
            Error::Truncation { .. } => StatusCode::PAYLOAD_TOO_LARGE,
            Error::Parse(_)
            | Error::MalformedStroke { .. }
            | Error::InvalidSketch(_)
            | Error::Usage(_)
            | Error::Shape(_) => StatusCode::BAD_REQUEST,
            Error::Decode(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, field, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

/// A parsed JSON request body plus the loaded model it will run against.
struct Request {
    body: Map<String, Value>,
    loaded: Arc<Loaded>,
    max_points: usize,
}

impl Request {
    fn parse(state: &AppState, headers: &HeaderMap, body: Result<Bytes, BytesRejection>) -> Result<Self, ApiError> {
        let loaded = state.get()?;
        let json = headers
            .get(CONTENT_TYPE)
            .and_then(|v| v.to_str().ok())
            .is_some_and(|v| v.split(';').next().is_some_and(|m| m.trim().eq_ignore_ascii_case("application/json")));
        if !json {
            return Err(ApiError::new(
                StatusCode::UNSUPPORTED_MEDIA_TYPE,
                None,
                "content type must be application/json",
            ));
        }
        let bytes = body.map_err(|r| ApiError::new(r.status(), None, r.body_text()))?;
        let value: Value = serde_json::from_slice(&bytes).map_err(|e| ApiError::bad("body", e.to_string()))?;
        let Value::Object(body) = value else {
            return Err(ApiError::bad("body", "expected a JSON object"));
        };
        Ok(Request {
            body,
            loaded,
            max_points: state.limits.max_points,
        })
    }

    fn required(&self, field: &str) -> Result<&Value, ApiError> {
        self.body.get(field).ok_or_else(|| ApiError::bad(field, "missing field"))
    }

    /// A sketch field, checked against the point limit and the model's
    /// sequence length.
    fn sketch(&self, field: &str) -> Result<Sketch, ApiError> {
        let sketch = Sketch::from_stroke_list(self.required(field)?).map_err(|e| ApiError::from_core(e, Some(field)))?;
        if sketch.num_points() > self.max_points {
            return Err(ApiError::new(
                StatusCode::PAYLOAD_TOO_LARGE,
                Some(field),
                format!("sketch has {} points, the limit is {}", sketch.num_points(), self.max_points),
            ));
        }
        self.loaded
            .model
            .input(&sketch)
            .map_err(|e| ApiError::from_core(e, Some(field)))?;
        Ok(sketch)
    }

    fn count(&self, field: &str, default: Option<usize>) -> Result<usize, ApiError> {
        match (self.body.get(field), default) {
            (None, Some(d)) => Ok(d),
            (None, None) => Err(ApiError::bad(field, "missing field")),
            (Some(v), _) => v
                .as_u64()
                .and_then(|n| usize::try_from(n).ok())
                .ok_or_else(|| ApiError::bad(field, "expected a non-negative integer")),
        }
    }

    fn seed(&self) -> Result<u64, ApiError> {
        match self.body.get("seed") {
            None => Ok(0),
            Some(v) => v.as_u64().ok_or_else(|| ApiError::bad("seed", "expected a non-negative integer")),
        }
    }

    fn number(&self, field: &str) -> Result<f64, ApiError> {
        self.required(field)?
            .as_f64()
            .ok_or_else(|| ApiError::bad(field, "expected a number"))
    }
}

/// Runs model work off the async executor and serializes the result.
async fn run<T, F>(f: F) -> Result<Response, ApiError>
where
    T: Serialize + Send + 'static,
    F: FnOnce() -> sketchformer::Result<T> + Send + 'static,
{
    match tokio::task::spawn_blocking(f).await {
        Ok(Ok(body)) => Ok(Json(body).into_response()),
        Ok(Err(e)) => Err(ApiError::from_core(e, None)),
        Err(e) => Err(ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, None, e.to_string())),
    }
}

type Body = Result<Bytes, BytesRejection>;

async fn encode(State(s): State<AppState>, h: HeaderMap, body: Body) -> Result<Response, ApiError> {
    let req = Request::parse(&s, &h, body)?;
    let sketch = req.sketch("strokes")?;
    run(move || api::encode(&req.loaded.model, &sketch)).await
}

async fn reconstruct(State(s): State<AppState>, h: HeaderMap, body: Body) -> Result<Response, ApiError> {
    let req = Request::parse(&s, &h, body)?;
    let sketch = req.sketch("strokes")?;
    run(move || api::reconstruct(&req.loaded.model, &sketch)).await
}

async fn interpolate(State(s): State<AppState>, h: HeaderMap, body: Body) -> Result<Response, ApiError> {
    let req = Request::parse(&s, &h, body)?;
    let (a, b) = (req.sketch("a")?, req.sketch("b")?);
    let steps = req.count("steps", Some(DEFAULT_INTERPOLATION_STEPS))?;
    if !(2..=api::MAX_INTERPOLATION_STEPS).contains(&steps) {
        return Err(ApiError::bad(
            "steps",
            format!("must be between 2 and {}", api::MAX_INTERPOLATION_STEPS),
        ));
    }
    run(move || api::interpolate(&req.loaded.model, &a, &b, steps)).await
}

async fn classify(State(s): State<AppState>, h: HeaderMap, body: Body) -> Result<Response, ApiError> {
    let req = Request::parse(&s, &h, body)?;
    let sketch = req.sketch("strokes")?;
    run(move || api::classify(&req.loaded.model, &sketch)).await
}

async fn retrieve(State(s): State<AppState>, h: HeaderMap, body: Body) -> Result<Response, ApiError> {
    let req = Request::parse(&s, &h, body)?;
    let Some(index_len) = req.loaded.index.as_ref().map(EmbeddingIndex::len) else {
        return Err(ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            None,
            "no retrieval index is loaded",
        ));
    };
    let sketch = req.sketch("strokes")?;
    let k = req.count("k", Some(10.min(index_len)))?;
    if !(1..=index_len).contains(&k) {
        return Err(ApiError::bad("k", format!("must be between 1 and {index_len}")));
    }
    run(move || {
        let index = req.loaded.index.as_ref().expect("checked above");
        api::retrieve(&req.loaded.model, index, &sketch, k)
    })
    .await
}

async fn perturb(State(s): State<AppState>, h: HeaderMap, body: Body) -> Result<Response, ApiError> {
    let req = Request::parse(&s, &h, body)?;
    let sketch = req.sketch("strokes")?;
    let sigma = req.number("sigma")?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(ApiError::bad("sigma", "must be a finite non-negative number"));
    }
    let seed = req.seed()?;
    run(move || api::perturb(&req.loaded.model, &sketch, sigma, seed)).await
}

async fn config(State(s): State<AppState>) -> Result<Response, ApiError> {
    let l = s.get()?;
    Ok(Json(api::ConfigBody::new(&l.model, l.index.as_ref(), s.limits.max_points)).into_response())
}

async fn health(State(s): State<AppState>) -> Response {
    match s.loaded.get() {
        Some(l) => Json(api::HealthBody {
            status: "ok",
            digest: l.model.digest().to_string(),
        })
        .into_response(),
        None => (
            StatusCode::SERVICE_UNAVAILABLE,
            Json(serde_json::json!({ "status": "loading" })),
        )
            .into_response(),
    }
}

pub fn router(state: AppState) -> Router {
    let origins: Vec<HeaderValue> = state
        .limits
        .cors_origins
        .iter()
        .filter_map(|o| match HeaderValue::from_str(o) {
            Ok(v) => Some(v),
            Err(_) => {
                log::warn!("ignoring invalid CORS origin {o:?}");
                None
            }
        })
        .collect();
    let cors = CorsLayer::new()
        .allow_origin(AllowOrigin::list(origins))
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([CONTENT_TYPE]);
    Router::new()
        .route("/api/encode", post(encode))
        .route("/api/reconstruct", post(reconstruct))
        .route("/api/interpolate", post(interpolate))
        .route("/api/classify", post(classify))
        .route("/api/retrieve", post(retrieve))
        .route("/api/perturb", post(perturb))
        .route("/api/config", get(config))
        .route("/api/health", get(health))
        .layer(DefaultBodyLimit::max(state.limits.max_body_bytes))
        .layer(cors)
        .with_state(state)
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error(transparent)]
    Load(#[from] Error),
    #[error("server failed: {0}")]
    Server(std::io::Error),
}

/// Listens on `config.listen` and loads the model in the background; the
/// service answers 503 until loading finishes. Returns only on failure.
pub async fn serve(config: ServiceConfig) -> Result<(), ServeError> {
    let listener = tokio::net::TcpListener::bind(config.listen)
        .await
        .map_err(|source| ServeError::Bind {
            addr: config.listen,
            source,
        })?;
    let state = AppState::pending(config.limits.clone());
    log::info!("listening on {}", config.listen);
    let server = axum::serve(listener, router(state.clone())).into_future();
    tokio::pin!(server);
    let cfg = config.clone();
    let loader = tokio::task::spawn_blocking(move || Loaded::load(&cfg));
    tokio::select! {
        r = &mut server => return r.map_err(ServeError::Server),
        loaded = loader => {
            let loaded = loaded.map_err(|e| ServeError::Server(std::io::Error::other(e)))??;
            log::info!("model {} ready", loaded.model.digest());
            state.install(loaded);
        }
    }
    server.await.map_err(ServeError::Server)
}

// The service chapter of the guide runs as a doctest.
#[cfg(doctest)]
#[doc = include_str!("../../../book/src/service.md")]
mod guide {}
