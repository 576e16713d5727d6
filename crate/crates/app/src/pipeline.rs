//! The one code path shared by the CLI and the service.

use std::time::Instant;

use fetalflow_core::domain::Query;
use fetalflow_core::engine::{Engine, EngineError};
use fetalflow_core::summarizer::{render, Format};

use crate::runs::{QuerySummary, RunRecord, Timings};

/// Query text when a video is submitted without one.
pub const DEFAULT_VIDEO_QUERY: &str = "summarize this video";

pub fn new_run_id() -> String {
    uuid::Uuid::new_v4().to_string()
}

pub fn execute(engine: &Engine, query: &Query) -> Result<RunRecord, EngineError> {
    let started_at = chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true);
    let t0 = Instant::now();
    let outcome = engine.run(query)?;
    Ok(RunRecord {
        run_id: new_run_id(),
        query: QuerySummary::of(query),
        outcome,
        timings: Timings {
            started_at,
            wall_ms: t0.elapsed().as_millis() as u64,
        },
    })
}

pub fn report_json(record: &RunRecord) -> Vec<u8> {
    render(record.outcome.report(), Format::Json)
}

pub fn report_markdown(record: &RunRecord) -> Vec<u8> {
    render(record.outcome.report(), Format::Markdown)
}
