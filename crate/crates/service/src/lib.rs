//! HTTP front end and command-line driver for the hairstyle-transfer pipeline.
//!
//! Routes:
//! - `GET /health` returns `{status, checkpoint, device}`.
//! - `GET /metrics` returns request counts and p50/p95 latency in ms.
//! - `POST /transfer` takes multipart `input`, `reference`, `ref_mask`,
//!   `target_mask`, optional `seed` and `input_mask`, and returns `image/png`
//!   with `X-Inference-Ms`, `X-Total-Ms` and, when relevant, `X-Coverage-Warning`.

pub mod cli;

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use axum::extract::multipart::MultipartRejection;
use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{HeaderMap, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ehgan_core::imaging::{decode_image, decode_mask_strict, encode_png, HairMask, PortraitImage};
use ehgan_core::pipeline::{run_pipeline, Model, TransferRequest};
use ehgan_core::superres::{build_backend, SrConfig, SuperResolver};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;

/// Per-file upload limit; four files plus form overhead fit in the body limit.
pub const MAX_UPLOAD_BYTES: usize = 10 * 1024 * 1024;
const BODY_LIMIT: usize = 4 * MAX_UPLOAD_BYTES + 1024 * 1024;
/// Latency samples kept for the percentile window.
const LATENCY_WINDOW: usize = 10_000;

pub const HEADER_INFERENCE_MS: &str = "x-inference-ms";
pub const HEADER_TOTAL_MS: &str = "x-total-ms";
pub const HEADER_COVERAGE_WARNING: &str = "x-coverage-warning";
pub const HEADER_SEED: &str = "x-seed";

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] ehgan_core::Error),
    #[error("server error: {0}")]
    Serve(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub checkpoint: PathBuf,
    pub superres: SrConfig,
    pub host: String,
    pub port: u16,
    pub max_inflight: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("model.ckpt"),
            superres: SrConfig::default(),
            host: "127.0.0.1".into(),
            port: 8080,
            max_inflight: 4,
        }
    }
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))?;
        if cfg.max_inflight == 0 {
            return Err(ServiceError::Config("max_inflight must be at least 1".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

#[derive(Debug, Default)]
struct Metrics {
    requests: u64,
    transfers: u64,
    errors: u64,
    latencies_ms: Vec<f64>,
}

impl Metrics {
    fn record(&mut self, ms: f64) {
        if self.latencies_ms.len() == LATENCY_WINDOW {
            self.latencies_ms.remove(0);
        }
        self.latencies_ms.push(ms);
    }
}

/// Nearest-rank percentile of unsorted samples.
pub fn percentile(samples: &[f64], p: f64) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[rank.min(v.len()) - 1])
}

/// Shared, read-only serving state.
#[derive(Clone)]
pub struct AppState {
    model: Arc<Model>,
    sr: Arc<dyn SuperResolver>,
    limiter: Arc<Semaphore>,
    metrics: Arc<Mutex<Metrics>>,
}

impl AppState {
    pub fn new(model: Model, sr: Box<dyn SuperResolver>, max_inflight: usize) -> Self {
        Self {
            model: Arc::new(model),
            sr: Arc::from(sr),
            limiter: Arc::new(Semaphore::new(max_inflight.max(1))),
            metrics: Arc::default(),
        }
    }

    /// Load the checkpoint and SR backend named by `config`.
    pub fn from_config(config: &ServiceConfig) -> Result<Self, ServiceError> {
        if !config.checkpoint.is_file() {
            return Err(ServiceError::Config(format!(
                "checkpoint not found: {}",
                config.checkpoint.display()
            )));
        }
        let model = Model::load(&config.checkpoint)?;
        let sr = build_backend(&config.superres)?;
        Ok(Self::new(model, sr, config.max_inflight))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/metrics", get(metrics))
        .route("/transfer", post(transfer))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// Bind and serve until ctrl-c.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let state = AppState::from_config(&config)?;
    let addr = format!("{}:{}", config.host, config.port);
    let listener = tokio::net::TcpListener::bind(&addr)
        .await
        .map_err(|source| ServiceError::Bind {
            addr: addr.clone(),
            source,
        })?;
    let local: SocketAddr = listener.local_addr()?;
    tracing::info!(%local, checkpoint = %config.checkpoint.display(), "serving");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    state.metrics.lock().expect("metrics lock").requests += 1;
    Json(json!({
        "status": "ok",
        "checkpoint": state.model.source(),
        "device": state.model.device_name(),
    }))
}

async fn metrics(State(state): State<AppState>) -> Json<serde_json::Value> {
    let mut m = state.metrics.lock().expect("metrics lock");
    m.requests += 1;
    Json(json!({
        "requests": m.requests,
        "transfer_requests": m.transfers,
        "errors": m.errors,
        "p50_ms": percentile(&m.latencies_ms, 50.0),
        "p95_ms": percentile(&m.latencies_ms, 95.0),
    }))
}

fn validation(fields: BTreeMap<String, String>, message: Option<String>) -> Response {
    let body = json!({
        "error": "validation",
        "message": message.unwrap_or_else(|| "invalid request".into()),
        "fields": fields,
    });
    (StatusCode::UNPROCESSABLE_ENTITY, Json(body)).into_response()
}

fn internal(message: String) -> Response {
    (
        StatusCode::INTERNAL_SERVER_ERROR,
        Json(json!({"error": "internal", "message": message})),
    )
        .into_response()
}

const IMAGE_FIELDS: [&str; 2] = ["input", "reference"];
const MASK_FIELDS: [&str; 3] = ["ref_mask", "target_mask", "input_mask"];
const REQUIRED_FIELDS: [&str; 4] = ["input", "reference", "ref_mask", "target_mask"];

#[derive(Default)]
struct Form {
    images: BTreeMap<&'static str, PortraitImage>,
    masks: BTreeMap<&'static str, HairMask>,
    seed: Option<u64>,
}

/// Decode every field, collecting one message per bad field.
async fn parse_form(mut multipart: Multipart) -> Result<Form, Response> {
    let mut form = Form::default();
    let mut errors = BTreeMap::new();
    loop {
        let field = match multipart.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => return Err(validation(BTreeMap::new(), Some(format!("malformed multipart body: {e}")))),
        };
        let name = field.name().unwrap_or_default().to_string();
        let bytes = match field.bytes().await {
            Ok(b) => b,
            Err(e) => {
                errors.insert(name, format!("unreadable field: {e}"));
                continue;
            }
        };
        if bytes.len() > MAX_UPLOAD_BYTES {
            errors.insert(name, format!("larger than {MAX_UPLOAD_BYTES} bytes"));
            continue;
        }
        if let Some(&key) = IMAGE_FIELDS.iter().find(|k| **k == name) {
            match decode_image(&bytes) {
                Ok(img) => {
                    form.images.insert(key, img);
                }
                Err(_) => {
                    errors.insert(name, "not a decodable PNG or JPEG image".into());
                }
            }
        } else if let Some(&key) = MASK_FIELDS.iter().find(|k| **k == name) {
            match decode_mask_strict(&bytes) {
                Ok(m) => {
                    form.masks.insert(key, m);
                }
                Err(ehgan_core::Error::Argument(msg)) => {
                    errors.insert(name, msg);
                }
                Err(_) => {
                    errors.insert(name, "not a decodable PNG mask".into());
                }
            }
        } else if name == "seed" {
            match std::str::from_utf8(&bytes).ok().and_then(|s| s.trim().parse::<u64>().ok()) {
                Some(s) => form.seed = Some(s),
                None => {
                    errors.insert(name, "seed must be a non-negative integer".into());
                }
            }
        } else {
            errors.insert(name, "unknown field".into());
        }
    }
    for key in REQUIRED_FIELDS {
        let present = form.images.contains_key(key) || form.masks.contains_key(key);
        if !present && !errors.contains_key(key) {
            errors.insert(key.to_string(), "missing required field".into());
        }
    }
    if errors.is_empty() {
        Ok(form)
    } else {
        Err(validation(errors, None))
    }
}

fn header(value: String) -> HeaderValue {
    HeaderValue::from_str(&value).unwrap_or_else(|_| HeaderValue::from_static("invalid"))
}

async fn transfer(
    State(state): State<AppState>,
    multipart: Result<Multipart, MultipartRejection>,
) -> Response {
    let start = Instant::now();
    {
        let mut m = state.metrics.lock().expect("metrics lock");
        m.requests += 1;
        m.transfers += 1;
    }
    let response = match multipart {
        Ok(mp) => handle_transfer(&state, mp, start).await,
        Err(e) => validation(BTreeMap::new(), Some(e.body_text())),
    };
    let ms = start.elapsed().as_secs_f64() * 1e3;
    let mut m = state.metrics.lock().expect("metrics lock");
    if response.status().is_success() {
        m.record(ms);
    } else {
        m.errors += 1;
    }
    tracing::info!(status = response.status().as_u16(), ms, "transfer");
    response
}

async fn handle_transfer(state: &AppState, multipart: Multipart, start: Instant) -> Response {
    let mut form = match parse_form(multipart).await {
        Ok(f) => f,
        Err(resp) => return resp,
    };
    let req = TransferRequest {
        input_image: form.images.remove("input").expect("checked"),
        reference_image: form.images.remove("reference").expect("checked"),
        reference_mask: form.masks.remove("ref_mask").expect("checked"),
        target_mask: form.masks.remove("target_mask").expect("checked"),
        input_mask: form.masks.remove("input_mask"),
        seed: form.seed,
    };
    let permit = match state.limiter.clone().acquire_owned().await {
        Ok(p) => p,
        Err(_) => return internal("service shutting down".into()),
    };
    let (model, sr) = (state.model.clone(), state.sr.clone());
    let joined = tokio::task::spawn_blocking(move || {
        let _permit = permit;
        let result = run_pipeline(&req, &model, sr.as_ref())?;
        let png = encode_png(&result.output_image)?;
        Ok::<_, ehgan_core::Error>((result, png))
    })
    .await;
    let (result, png) = match joined {
        Ok(Ok(v)) => v,
        Ok(Err(e)) if e.is_validation() => return validation(BTreeMap::new(), Some(e.to_string())),
        Ok(Err(e)) => return internal(e.to_string()),
        Err(e) => return internal(format!("worker failed: {e}")),
    };
    let mut headers = HeaderMap::new();
    headers.insert(axum::http::header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    headers.insert(
        HeaderName::from_static(HEADER_INFERENCE_MS),
        header(format!("{:.3}", result.timing.inference_ms)),
    );
    headers.insert(
        HeaderName::from_static(HEADER_TOTAL_MS),
        header(format!("{:.3}", start.elapsed().as_secs_f64() * 1e3)),
    );
    headers.insert(HeaderName::from_static(HEADER_SEED), header(result.seed.to_string()));
    if let Some(w) = &result.coverage_warning {
        headers.insert(HeaderName::from_static(HEADER_COVERAGE_WARNING), header(w.clone()));
    }
    (StatusCode::OK, headers, png).into_response()
}
