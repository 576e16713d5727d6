//! HTTP API over the engine.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Request, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use base64::Engine as _;
use fetalflow_core::config::{image_from_path, VideoManifest};
use fetalflow_core::domain::{ImageRef, ImageSource, Query};
use fetalflow_core::engine::{Engine, EngineError};
use fetalflow_core::imageio::image_dims_from_bytes;
use serde::Deserialize;

use crate::pipeline::{self, DEFAULT_VIDEO_QUERY};
use crate::runs::{RunRecord, RunStore};

const BODY_LIMIT: usize = 64 * 1024 * 1024;

#[derive(Clone)]
pub struct AppState {
    pub engine: Arc<Engine>,
    pub store: Arc<RunStore>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(|| async { "ok" }))
        .route("/v1/analyze", post(analyze))
        .route("/v1/summarize-video", post(summarize_video))
        .route("/v1/runs/:id", get(get_run))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    let body = serde_json::json!({ "error": message.into() });
    (status, [(header::CONTENT_TYPE, "application/json")], body.to_string()).into_response()
}

pub fn status_for(e: &EngineError) -> StatusCode {
    match e {
        EngineError::Input(_) => StatusCode::BAD_REQUEST,
        EngineError::Plan(_) => StatusCode::SERVICE_UNAVAILABLE,
        EngineError::Expert(_) | EngineError::Fusion { .. } => StatusCode::BAD_GATEWAY,
    }
}

fn json_response(bytes: Vec<u8>, run_id: &str) -> Response {
    let mut resp = Response::new(Body::from(bytes));
    let h = resp.headers_mut();
    h.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/json"));
    if let Ok(v) = HeaderValue::from_str(run_id) {
        h.insert("x-run-id", v);
    }
    resp
}

async fn execute(state: AppState, query: Query) -> Response {
    let joined = tokio::task::spawn_blocking(move || -> Result<RunRecord, Response> {
        let record = pipeline::execute(&state.engine, &query).map_err(|e| error(status_for(&e), e.to_string()))?;
        state
            .store
            .append(&record)
            .map_err(|e| error(StatusCode::INTERNAL_SERVER_ERROR, format!("run store: {e}")))?;
        Ok(record)
    })
    .await;
    match joined {
        Ok(Ok(record)) => {
            tracing::info!(run_id = %record.run_id, input = %record.query.input, "run complete");
            json_response(pipeline::report_json(&record), &record.run_id)
        }
        Ok(Err(resp)) => resp,
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, format!("engine task: {e}")),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageInput {
    #[serde(default)]
    path: Option<PathBuf>,
    #[serde(default)]
    png_base64: Option<String>,
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    spacing_mm: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AnalyzeBody {
    query: String,
    image: ImageInput,
}

fn image_from_bytes(bytes: &[u8], id: String, spacing: Option<f64>) -> Result<ImageRef, String> {
    let (w, h) = image_dims_from_bytes(bytes).map_err(|e| e.to_string())?;
    let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
    let img = ImageRef::new(id, ImageSource::PngBase64(encoded), w, h).map_err(|e| e.to_string())?;
    match spacing {
        Some(s) => img.with_spacing(s).map_err(|e| e.to_string()),
        None => Ok(img),
    }
}

fn resolve_image(input: ImageInput) -> Result<ImageRef, String> {
    match (input.path, input.png_base64) {
        (Some(p), None) => {
            let mut img = image_from_path(&p, input.spacing_mm).map_err(|e| e.to_string())?;
            if let Some(id) = input.id {
                img.id = id;
            }
            Ok(img)
        }
        (None, Some(b64)) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64.trim())
                .map_err(|e| format!("png_base64: {e}"))?;
            image_from_bytes(&bytes, input.id.unwrap_or_else(|| "image".into()), input.spacing_mm)
        }
        _ => Err("image needs exactly one of path or png_base64".into()),
    }
}

fn file_stem(name: &str) -> String {
    std::path::Path::new(name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

async fn multipart_query(mut mp: Multipart) -> Result<Query, String> {
    let mut text = None;
    let mut bytes = None;
    let mut id = None;
    let mut spacing = None;
    while let Some(field) = mp.next_field().await.map_err(|e| e.to_string())? {
        let name = field.name().unwrap_or_default().to_string();
        match name.as_str() {
            "query" => text = Some(field.text().await.map_err(|e| e.to_string())?),
            "id" => id = Some(field.text().await.map_err(|e| e.to_string())?),
            "spacing_mm" => {
                let s = field.text().await.map_err(|e| e.to_string())?;
                spacing = Some(s.trim().parse::<f64>().map_err(|_| format!("spacing_mm {s:?} is not a number"))?);
            }
            "image" => {
                if id.is_none() {
                    id = field.file_name().map(file_stem);
                }
                bytes = Some(field.bytes().await.map_err(|e| e.to_string())?);
            }
            other => return Err(format!("unexpected field {other:?}")),
        }
    }
    let text = text.ok_or("missing field \"query\"")?;
    let bytes = bytes.ok_or("missing field \"image\"")?;
    let image = image_from_bytes(&bytes, id.unwrap_or_else(|| "image".into()), spacing)?;
    Ok(Query::image(text, image))
}

async fn analyze(State(state): State<AppState>, req: Request) -> Response {
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let query = if is_multipart {
        match Multipart::from_request(req, &()).await {
            Ok(mp) => multipart_query(mp).await,
            Err(e) => Err(e.body_text()),
        }
    } else {
        match axum::body::to_bytes(req.into_body(), BODY_LIMIT).await {
            Ok(bytes) => serde_json::from_slice::<AnalyzeBody>(&bytes)
                .map_err(|e| format!("malformed request: {e}"))
                .and_then(|b| Ok(Query::image(b.query, resolve_image(b.image)?))),
            Err(e) => Err(e.to_string()),
        }
    };
    match query {
        Ok(q) => execute(state, q).await,
        Err(msg) => error(StatusCode::BAD_REQUEST, msg),
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VideoBody {
    #[serde(default)]
    query: Option<String>,
    #[serde(default)]
    manifest: Option<PathBuf>,
    #[serde(default)]
    video: Option<VideoManifest>,
}

fn video_query(body: VideoBody) -> Result<Query, String> {
    let manifest = match (body.manifest, body.video) {
        (Some(p), None) => VideoManifest::load(&p).map_err(|e| e.to_string())?,
        (None, Some(v)) => v,
        _ => return Err("request needs exactly one of manifest or video".into()),
    };
    let stream = manifest.stream().map_err(|e| e.to_string())?;
    Ok(Query::video(body.query.unwrap_or_else(|| DEFAULT_VIDEO_QUERY.into()), stream))
}

async fn summarize_video(State(state): State<AppState>, body: axum::body::Bytes) -> Response {
    let query = serde_json::from_slice::<VideoBody>(&body)
        .map_err(|e| format!("malformed request: {e}"))
        .and_then(video_query);
    match query {
        Ok(q) => execute(state, q).await,
        Err(msg) => error(StatusCode::BAD_REQUEST, msg),
    }
}

async fn get_run(State(state): State<AppState>, Path(id): Path<String>) -> Response {
    match state.store.get(&id) {
        Ok(Some(record)) => match serde_json::to_vec_pretty(&record) {
            Ok(bytes) => json_response(bytes, &record.run_id),
            Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        },
        Ok(None) => error(StatusCode::NOT_FOUND, format!("unknown run {id}")),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}
