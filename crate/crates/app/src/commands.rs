//! CLI command bodies. Each returns a `Failure` carrying the exit status.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fetalflow_core::config::{image_from_path, EngineConfig, VideoManifest};
use fetalflow_core::domain::{Measure, Query, TaskType};
use fetalflow_core::engine::Engine;
use fetalflow_core::growth::load_chart;
use fetalflow_core::metrics::{evaluate, parse_manifest, MetricReport};
use fetalflow_core::mocks::{builtin_set, MockSpec};

use crate::pipeline::{self, DEFAULT_VIDEO_QUERY};
use crate::runs::RunStore;
use crate::service::{router, AppState};
use crate::settings::{self, DEFAULT_PORT};

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl std::fmt::Display) -> Self {
        Self {
            code: 1,
            message: message.to_string(),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

/// Files produced by a successful run.
#[derive(Debug, Clone)]
pub struct Written {
    pub run_id: String,
    pub report_json: PathBuf,
    pub report_md: PathBuf,
    pub record: PathBuf,
}

pub fn load_engine(config: &Path) -> Result<(EngineConfig, Engine), Failure> {
    let cfg = settings::load(config).map_err(Failure::input)?;
    let engine = cfg.build().map_err(Failure::input)?;
    Ok((cfg, engine))
}

fn run_and_write(cfg: &EngineConfig, engine: &Engine, query: &Query, out: &Path) -> Result<Written, Failure> {
    let record = pipeline::execute(engine, query).map_err(|e| Failure {
        code: e.exit_code(),
        message: e.to_string(),
    })?;
    let io = |p: &Path, e: std::io::Error| Failure::input(format!("{}: {e}", p.display()));
    fs::create_dir_all(out).map_err(|e| io(out, e))?;
    let report_json = out.join("report.json");
    let report_md = out.join("report.md");
    fs::write(&report_json, pipeline::report_json(&record)).map_err(|e| io(&report_json, e))?;
    fs::write(&report_md, pipeline::report_markdown(&record)).map_err(|e| io(&report_md, e))?;
    let runs = cfg.runs_dir.clone().unwrap_or_else(|| out.join("runs"));
    let store = RunStore::open(&runs).map_err(|e| io(&runs, e))?;
    let record_path = store.append(&record).map_err(|e| io(&runs, e))?;
    Ok(Written {
        run_id: record.run_id,
        report_json,
        report_md,
        record: record_path,
    })
}

pub fn analyze(image: &Path, query: &str, config: &Path, out: &Path, spacing_mm: Option<f64>) -> Result<Written, Failure> {
    let (cfg, engine) = load_engine(config)?;
    let image = image_from_path(image, spacing_mm).map_err(Failure::input)?;
    run_and_write(&cfg, &engine, &Query::image(query, image), out)
}

pub fn summarize_video(manifest: &Path, query: Option<&str>, config: &Path, out: &Path) -> Result<Written, Failure> {
    let (cfg, engine) = load_engine(config)?;
    let stream = VideoManifest::load(manifest)
        .and_then(|m| m.stream())
        .map_err(Failure::input)?;
    let query = Query::video(query.unwrap_or(DEFAULT_VIDEO_QUERY), stream);
    run_and_write(&cfg, &engine, &query, out)
}

/// Evaluates a JSON-lines manifest. The HC chart from `config`, when given,
/// enables the validity rate for GA manifests.
pub fn eval(manifest: &Path, task: &str, config: Option<&Path>, out: Option<&Path>) -> Result<MetricReport, Failure> {
    let task: TaskType = task.parse().map_err(|_| Failure::input(format!("unknown task {task:?}")))?;
    let chart = match config {
        Some(c) => {
            let cfg = settings::load(c).map_err(Failure::input)?;
            Some(load_chart(Measure::HC, &cfg.charts.hc).map_err(Failure::input)?)
        }
        None => None,
    };
    let text = fs::read_to_string(manifest).map_err(|e| Failure::input(format!("{}: {e}", manifest.display())))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let parsed = parse_manifest(&text, task, base).map_err(Failure::input)?;
    let report = evaluate(&parsed, chart.as_ref()).map_err(Failure::input)?;
    if let Some(dir) = out {
        let io = |p: &Path, e: std::io::Error| Failure::input(format!("{}: {e}", p.display()));
        fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let json = serde_json::to_string_pretty(&report).map_err(Failure::input)? + "\n";
        let p = dir.join("metrics.json");
        fs::write(&p, json).map_err(|e| io(&p, e))?;
        let p = dir.join("metrics.txt");
        fs::write(&p, report.to_table()).map_err(|e| io(&p, e))?;
    }
    Ok(report)
}

pub async fn serve(config: &Path, port: Option<u16>, bind: &str) -> Result<(), Failure> {
    let (cfg, engine) = load_engine(config)?;
    let runs = cfg.runs_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
    let store = RunStore::open(&runs).map_err(|e| Failure::input(format!("{}: {e}", runs.display())))?;
    let state = AppState {
        engine: Arc::new(engine),
        store: Arc::new(store),
    };
    let port = port.or(cfg.port).unwrap_or(DEFAULT_PORT);
    let listener = tokio::net::TcpListener::bind((bind, port))
        .await
        .map_err(|e| Failure::input(format!("bind {bind}:{port}: {e}")))?;
    tracing::info!(addr = %listener.local_addr().map(|a| a.to_string()).unwrap_or_default(), runs = %runs.display(), "serving");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Failure::input(e.to_string()))
}

/// Stub tool over stdio, or over HTTP when `port` is given.
/// Extra mocks come from a config's `mocks` table and/or a bare mock table file.
pub async fn mock_tool(
    config: Option<&Path>,
    mocks_file: Option<&Path>,
    fallback: Option<&str>,
    port: Option<u16>,
) -> Result<(), Failure> {
    let mut mocks: BTreeMap<String, MockSpec> = match config {
        Some(c) => EngineConfig::load(c).map_err(Failure::input)?.mocks,
        None => BTreeMap::new(),
    };
    if let Some(p) = mocks_file {
        let text = fs::read_to_string(p).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
        let extra: BTreeMap<String, MockSpec> =
            serde_json::from_str(&text).map_err(|e| Failure::input(format!("{}: {e}", p.display())))?;
        mocks.extend(extra);
    }
    let tools = builtin_set(&mocks);
    match port {
        None => {
            let fallback = fallback.map(str::to_string);
            tokio::task::spawn_blocking(move || crate::mock_tool::serve_stdio(&tools, fallback.as_deref()))
                .await
                .map_err(|e| Failure::input(e.to_string()))?
                .map_err(Failure::input)
        }
        Some(port) => {
            let listener = tokio::net::TcpListener::bind(("127.0.0.1", port))
                .await
                .map_err(|e| Failure::input(format!("bind port {port}: {e}")))?;
            axum::serve(listener, crate::mock_tool::router(tools, fallback.map(str::to_string)))
                .await
                .map_err(|e| Failure::input(e.to_string()))
        }
    }
}
