//! Append-only run store: `<root>/<run_id>/record.json` plus `<root>/index.json`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use fetalflow_core::domain::{Query, QueryInput};
use fetalflow_core::engine::Outcome;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySummary {
    pub text: String,
    /// "image" or "video".
    pub input: String,
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<usize>,
}

impl QuerySummary {
    pub fn of(query: &Query) -> Self {
        match &query.input {
            QueryInput::Image(img) => Self {
                text: query.text.clone(),
                input: "image".into(),
                id: img.id.clone(),
                frames: None,
            },
            QueryInput::Video(v) => Self {
                text: query.text.clone(),
                input: "video".into(),
                id: v.id.clone(),
                frames: Some(v.len()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub started_at: String,
    pub wall_ms: u64,
}

/// Everything needed to audit one run: the query, the plan and per-tool
/// results (inside `outcome`), and the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub query: QuerySummary,
    pub outcome: Outcome,
    pub timings: Timings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub run_id: String,
    pub input: String,
    pub id: String,
    pub started_at: String,
}

#[derive(Debug)]
pub struct RunStore {
    root: PathBuf,
    // Serializes writers of index.json and run directories.
    writer: Mutex<()>,
}

const RECORD: &str = "record.json";
const INDEX: &str = "index.json";

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-')
}

fn pretty<T: Serialize>(v: &T) -> io::Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(&serde_json::to_value(v)?)?;
    s.push('\n');
    Ok(s.into_bytes())
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            writer: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes a new record. Fails if the run id already exists.
    pub fn append(&self, record: &RunRecord) -> io::Result<PathBuf> {
        if !valid_id(&record.run_id) {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, format!("bad run id {:?}", record.run_id)));
        }
        let _guard = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let dir = self.root.join(&record.run_id);
        fs::create_dir(&dir)?;
        let path = dir.join(RECORD);
        fs::write(&path, pretty(record)?)?;

        let mut index = self.read_index()?;
        index.push(IndexEntry {
            run_id: record.run_id.clone(),
            input: record.query.input.clone(),
            id: record.query.id.clone(),
            started_at: record.timings.started_at.clone(),
        });
        let tmp = self.root.join(format!("{INDEX}.tmp"));
        fs::write(&tmp, pretty(&index)?)?;
        fs::rename(tmp, self.root.join(INDEX))?;
        Ok(path)
    }

    pub fn get(&self, run_id: &str) -> io::Result<Option<RunRecord>> {
        if !valid_id(run_id) {
            return Ok(None);
        }
        match fs::read(self.root.join(run_id).join(RECORD)) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn index(&self) -> io::Result<Vec<IndexEntry>> {
        let _guard = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        self.read_index()
    }

    fn read_index(&self) -> io::Result<Vec<IndexEntry>> {
        match fs::read(self.root.join(INDEX)) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(e),
        }
    }
}
