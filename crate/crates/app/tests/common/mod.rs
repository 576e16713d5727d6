#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use fetalflow::runs::RunStore;
use fetalflow::service::{router, AppState};
use fetalflow::settings;
use http_body_util::BodyExt;
use tower::ServiceExt;

pub fn testdata() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../testdata")
        .canonicalize()
        .unwrap()
}

pub fn mock_config() -> PathBuf {
    testdata().join("config/mock.json")
}

pub fn blessing() -> bool {
    std::env::var_os("FETALFLOW_BLESS").is_some()
}

#[derive(Debug, Clone)]
pub enum Input {
    Image { image: &'static str, query: &'static str, spacing: f64 },
    Video { manifest: &'static str },
}

#[derive(Debug, Clone)]
pub struct GoldenCase {
    pub name: &'static str,
    pub input: Input,
}

impl GoldenCase {
    pub fn golden(&self) -> PathBuf {
        testdata().join("golden").join(self.name).join("report.json")
    }
}

pub fn golden_cases() -> Vec<GoldenCase> {
    vec![
        GoldenCase {
            name: "analyze_hc",
            input: Input::Image { image: "images/head.png", query: "measure the head circumference", spacing: 0.5 },
        },
        GoldenCase {
            name: "analyze_caption",
            input: Input::Image { image: "images/head.png", query: "describe this image", spacing: 0.5 },
        },
        GoldenCase {
            name: "analyze_abdomen",
            input: Input::Image { image: "images/abdomen.png", query: "write a report for this scan", spacing: 0.5 },
        },
        GoldenCase {
            name: "analyze_aop",
            input: Input::Image { image: "images/intrapartum.png", query: "angle of progression", spacing: 0.5 },
        },
        GoldenCase {
            name: "summarize_video",
            input: Input::Video { manifest: "video/manifest.json" },
        },
    ]
}

fn cli() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_fetalflow"));
    for (k, _) in std::env::vars() {
        if k.starts_with("FETALFLOW_") {
            c.env_remove(k);
        }
    }
    c
}

pub fn run_cli(args: &[&str]) -> Output {
    cli().args(args).output().unwrap()
}

pub fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Runs a golden case through the CLI; returns the exit code and report bytes.
pub fn cli_report(case: &GoldenCase, config: &Path, out: &Path) -> (i32, Vec<u8>) {
    let td = testdata();
    let o = match &case.input {
        Input::Image { image, query, spacing } => run_cli(&[
            "analyze",
            "--image",
            td.join(image).to_str().unwrap(),
            "--query",
            query,
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--spacing",
            &spacing.to_string(),
        ]),
        Input::Video { manifest } => run_cli(&[
            "summarize-video",
            "--manifest",
            td.join(manifest).to_str().unwrap(),
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]),
    };
    let report = std::fs::read(out.join("report.json")).unwrap_or_default();
    (code(&o), report)
}

pub fn service(config: &Path, runs: &Path) -> axum::Router {
    let cfg = settings::load(config).unwrap();
    let engine = cfg.build().unwrap();
    router(AppState {
        engine: Arc::new(engine),
        store: Arc::new(RunStore::open(runs).unwrap()),
    })
}

pub fn rt() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap()
}

pub struct Reply {
    pub status: StatusCode,
    pub run_id: Option<String>,
    pub body: Vec<u8>,
}

impl Reply {
    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }
}

pub async fn send(app: &axum::Router, req: Request<Body>) -> Reply {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let run_id = resp
        .headers()
        .get("x-run-id")
        .map(|v| v.to_str().unwrap().to_string());
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply { status, run_id, body }
}

pub fn post_json(uri: &str, body: serde_json::Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

pub fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

/// The JSON request the service needs for a golden case.
pub fn service_request(case: &GoldenCase) -> Request<Body> {
    let td = testdata();
    match &case.input {
        Input::Image { image, query, spacing } => post_json(
            "/v1/analyze",
            serde_json::json!({
                "query": query,
                "image": {"path": td.join(image), "spacing_mm": spacing},
            }),
        ),
        Input::Video { manifest } => post_json("/v1/summarize-video", serde_json::json!({"manifest": td.join(manifest)})),
    }
}

pub fn multipart_request(image: &Path, query: &str, spacing: f64) -> Request<Body> {
    let boundary = "----fetalflow-test-boundary";
    let bytes = std::fs::read(image).unwrap();
    let name = image.file_name().unwrap().to_str().unwrap();
    let mut body = Vec::new();
    let text_part = |body: &mut Vec<u8>, field: &str, value: &str| {
        body.extend_from_slice(
            format!("--{boundary}\r\nContent-Disposition: form-data; name=\"{field}\"\r\n\r\n{value}\r\n").as_bytes(),
        );
    };
    text_part(&mut body, "query", query);
    text_part(&mut body, "spacing_mm", &spacing.to_string());
    body.extend_from_slice(
        format!(
            "--{boundary}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"{name}\"\r\nContent-Type: image/png\r\n\r\n"
        )
        .as_bytes(),
    );
    body.extend_from_slice(&bytes);
    body.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
    Request::post("/v1/analyze")
        .header("content-type", format!("multipart/form-data; boundary={boundary}"))
        .body(Body::from(body))
        .unwrap()
}

/// Copies the mock config into `dir` after `edit`, with chart paths made absolute.
pub fn derived_config(dir: &Path, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(mock_config()).unwrap()).unwrap();
    let charts = testdata().join("charts");
    v["charts"]["hc"] = charts.join("hc.csv").to_str().unwrap().into();
    v["charts"]["ac"] = charts.join("ac.csv").to_str().unwrap().into();
    edit(&mut v);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&v).unwrap()).unwrap();
    path
}

/// Drops the expert with `id` from a config document.
pub fn without_expert(v: &mut serde_json::Value, id: &str) {
    v["experts"].as_array_mut().unwrap().retain(|e| e["expert_id"] != id);
}

/// Checks `bytes` against the golden file, rewriting it when blessing.
pub fn check_golden(case: &GoldenCase, bytes: &[u8]) -> Result<(), String> {
    let path = case.golden();
    if blessing() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, bytes).unwrap();
        return Ok(());
    }
    let want = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if want == bytes {
        Ok(())
    } else {
        Err(format!(
            "{} differs from golden\n--- got ---\n{}",
            case.name,
            String::from_utf8_lossy(bytes)
        ))
    }
}
