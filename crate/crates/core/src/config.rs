//! Engine configuration file and video manifests.
//!
//! Relative paths in either file are resolved against the file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordinator::{IntentParser, LexiconError, RuleIntentParser, ToolIntentParser};
use crate::domain::{DomainError, ImageRef, ImageSource, Measure, PatientMetadata, VideoStream};
use crate::engine::Engine;
use crate::growth::{load_chart, ChartError, ChartSet};
use crate::imageio::{image_dims, ImageIoError};
use crate::mocks::{builtin_set, MockSpec};
use crate::protocol::{ExpertSpec, Registry, RegistryError, ToolClient, ToolSpec, Transport};
use crate::summarizer::{FixedClock, ReportSettings, ReportTemplate, Summarizer, SystemClock, TemplateError, Clock};
use crate::video::VideoSettings;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Chart(#[from] ChartError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Image(#[from] ImageIoError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn read(path: &Path) -> Result<String, ConfigError> {
    std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, ConfigError> {
    serde_json::from_str(text).map_err(|source| ConfigError::Json {
        path: path.display().to_string(),
        source,
    })
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartPaths {
    pub hc: PathBuf,
    pub ac: PathBuf,
}

/// How query text is mapped to a task.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum IntentBackend {
    #[default]
    Rules,
    /// Asks a text-returning tool, falling back to the lexicon.
    Tool { tool: ToolSpec },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub experts: Vec<ExpertSpec>,
    /// Named mocks for builtin transports, on top of the `const_<plane>` set.
    #[serde(default)]
    pub mocks: BTreeMap<String, MockSpec>,
    pub charts: ChartPaths,
    /// Intent lexicon; the bundled one when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report_template: Option<PathBuf>,
    #[serde(default)]
    pub intent: IntentBackend,
    #[serde(default)]
    pub video: VideoSettings,
    #[serde(default)]
    pub report: ReportSettings,
    /// Cap on concurrent tool calls per expert.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parallelism: Option<usize>,
    /// Pinned report timestamp (RFC 3339); wall clock when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clock: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub engine_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runs_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub port: Option<u16>,
}

impl EngineConfig {
    pub fn from_json(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let mut cfg: EngineConfig = parse(Path::new("<config>"), text)?;
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut cfg: EngineConfig = parse(path, &read(path)?)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.charts.hc);
        resolve(base, &mut self.charts.ac);
        for p in [&mut self.lexicon, &mut self.report_template, &mut self.runs_dir]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let builtins = builtin_set(&self.mocks);
        let tools = self
            .experts
            .iter()
            .flat_map(|e| &e.tools)
            .chain(match &self.intent {
                IntentBackend::Tool { tool } => Some(tool),
                IntentBackend::Rules => None,
            });
        for tool in tools {
            if let Transport::Builtin(name) = &tool.transport {
                if !builtins.contains_key(name) {
                    return Err(ConfigError::Invalid(format!(
                        "tool {} uses unknown mock {name:?}",
                        tool.tool_id
                    )));
                }
            }
        }
        if self.parallelism == Some(0) {
            return Err(ConfigError::Invalid("parallelism must be at least 1".into()));
        }
        self.video.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let band = self.report.reflection_band;
        if !(0.0 <= band.lower && band.lower < band.upper && band.upper <= 100.0) {
            return Err(ConfigError::Invalid("reflection band must satisfy 0 <= lower < upper <= 100".into()));
        }
        if let Some(ts) = &self.clock {
            FixedClock::parse(ts).map_err(|e| ConfigError::Invalid(format!("clock {ts:?}: {e}")))?;
        }
        Ok(())
    }

    pub fn build(&self) -> Result<Engine, ConfigError> {
        self.validate()?;
        let registry = Registry::new(self.experts.clone())?;
        let mut client = ToolClient::new(builtin_set(&self.mocks));
        if let Some(n) = self.parallelism {
            client = client.with_parallelism(n);
        }
        let client = Arc::new(client);
        let mut charts = ChartSet::new();
        charts.insert(Measure::HC, load_chart(Measure::HC, &self.charts.hc)?);
        charts.insert(Measure::AC, load_chart(Measure::AC, &self.charts.ac)?);
        let rules = match &self.lexicon {
            Some(p) => RuleIntentParser::from_file(p)?,
            None => RuleIntentParser::default(),
        };
        let intent: Arc<dyn IntentParser> = match &self.intent {
            IntentBackend::Rules => Arc::new(rules),
            IntentBackend::Tool { tool } => {
                tool.validate()?;
                Arc::new(ToolIntentParser::new(tool.clone(), client.clone(), rules))
            }
        };
        let template = match &self.report_template {
            Some(p) => ReportTemplate::load(p)?,
            None => ReportTemplate::default(),
        };
        let clock: Arc<dyn Clock> = match &self.clock {
            Some(ts) => Arc::new(FixedClock::parse(ts).map_err(|e| ConfigError::Invalid(e.to_string()))?),
            None => Arc::new(SystemClock),
        };
        let mut summarizer = Summarizer::new(template, self.report.clone(), clock);
        if let Some(v) = &self.engine_version {
            summarizer = summarizer.with_engine_version(v.clone());
        }
        Ok(Engine::new(registry, client, charts)
            .with_intent(intent)
            .with_summarizer(summarizer)
            .with_video(self.video.clone()))
    }
}

/// An image on disk as an [`ImageRef`]; the id is the file stem.
pub fn image_from_path(path: &Path, spacing_mm: Option<f64>) -> Result<ImageRef, ConfigError> {
    let (w, h) = image_dims(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let image = ImageRef::new(id, ImageSource::Path(path.to_string_lossy().into_owned()), w, h)?;
    Ok(match spacing_mm {
        Some(s) => image.with_spacing(s)?,
        None => image,
    })
}

/// A video as a list of PNG frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoManifest {
    pub id: String,
    pub fps: f64,
    pub frames: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_spacing_mm: Option<f64>,
    #[serde(default)]
    pub metadata: PatientMetadata,
}

impl VideoManifest {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let mut m: VideoManifest = parse(path, &read(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for f in &mut m.frames {
            resolve(base, f);
        }
        Ok(m)
    }

    pub fn stream(&self) -> Result<VideoStream, ConfigError> {
        let frames = self
            .frames
            .iter()
            .map(|p| image_from_path(p, self.pixel_spacing_mm))
            .collect::<Result<Vec<_>, _>>()?;
        let raw = serde_json::json!({
            "id": self.id,
            "fps": self.fps,
            "frames": frames,
            "metadata": self.metadata,
        });
        // Goes through the validating deserializer.
        serde_json::from_value(raw).map_err(|e| ConfigError::Invalid(format!("video {}: {e}", self.id)))
    }
}
