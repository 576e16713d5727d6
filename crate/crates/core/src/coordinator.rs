//! Query routing: intent classification, plane identification and dispatch
//! planning.

use std::path::Path;
use std::sync::Arc;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    ExpertResult, FusedResult, ImageRef, Payload, PlaneLabel, Query, QueryInput, ScalarMap,
    StructuredPrompt, TaskType,
};
use crate::fusion::{self, FusionError};
use crate::protocol::{ExpertFailure, Registry, ToolClient, ToolRequest, ToolSpec};

/// The lexicon shipped with the engine.
pub const DEFAULT_LEXICON: &str = include_str!("../data/intent_rules.json");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("no registered expert for task {0}")]
    MissingExpert(TaskType),
    #[error("invalid prompt: {0}")]
    Prompt(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlaneError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Expert(#[from] ExpertFailure),
    #[error("plane fusion failed: {0}")]
    Fusion(#[from] FusionError),
}

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("lexicon is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("rule {index}: bad pattern {pattern:?}: {reason}")]
    Pattern {
        index: usize,
        pattern: String,
        reason: String,
    },
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentRule {
    /// Keyword or phrase; matched case-insensitively on word boundaries,
    /// with any run of whitespace between words.
    pub pattern: String,
    pub task: TaskType,
    pub priority: i64,
}

#[derive(Debug, Clone)]
struct CompiledRule {
    rule: IntentRule,
    regex: Regex,
}

fn phrase_regex(phrase: &str) -> Result<Regex, regex::Error> {
    let words: Vec<String> = phrase.split_whitespace().map(regex::escape).collect();
    if words.is_empty() {
        return Err(regex::Error::Syntax("empty pattern".into()));
    }
    RegexBuilder::new(&format!(r"\b{}\b", words.join(r"\s+")))
        .case_insensitive(true)
        .build()
}

/// Classifies a query into a task type.
pub trait IntentParser: Send + Sync {
    fn classify(&self, query: &Query) -> TaskType;
}

/// Adapts a task to the query's input kind: caption requests on video are
/// video summaries and vice versa.
fn fit_to_input(task: TaskType, query: &Query) -> TaskType {
    match (task, query.is_video()) {
        (TaskType::ImageCaption, true) => TaskType::VideoSummary,
        (TaskType::VideoSummary, false) => TaskType::ImageCaption,
        (t, _) => t,
    }
}

fn fallback(query: &Query) -> TaskType {
    if query.is_video() {
        TaskType::VideoSummary
    } else {
        TaskType::ImageCaption
    }
}

/// Keyword lexicon with priorities. The highest priority match wins; equal
/// priorities go to the rule declared first.
#[derive(Debug, Clone)]
pub struct RuleIntentParser {
    rules: Vec<CompiledRule>,
}

impl RuleIntentParser {
    pub fn new(rules: Vec<IntentRule>) -> Result<Self, LexiconError> {
        let compiled = rules
            .into_iter()
            .enumerate()
            .map(|(index, rule)| {
                let regex = phrase_regex(&rule.pattern).map_err(|e| LexiconError::Pattern {
                    index,
                    pattern: rule.pattern.clone(),
                    reason: e.to_string(),
                })?;
                Ok(CompiledRule { rule, regex })
            })
            .collect::<Result<Vec<_>, LexiconError>>()?;
        Ok(Self { rules: compiled })
    }

    pub fn from_json(text: &str) -> Result<Self, LexiconError> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self, LexiconError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn rules(&self) -> impl Iterator<Item = &IntentRule> {
        self.rules.iter().map(|r| &r.rule)
    }

    /// The winning rule for `text`, if any.
    pub fn matching_rule(&self, text: &str) -> Option<&IntentRule> {
        let mut best: Option<&IntentRule> = None;
        for r in &self.rules {
            if r.regex.is_match(text) && best.map_or(true, |b| r.rule.priority > b.priority) {
                best = Some(&r.rule);
            }
        }
        best
    }
}

impl Default for RuleIntentParser {
    fn default() -> Self {
        Self::from_json(DEFAULT_LEXICON).expect("shipped lexicon is valid")
    }
}

impl IntentParser for RuleIntentParser {
    fn classify(&self, query: &Query) -> TaskType {
        match self.matching_rule(&query.text) {
            Some(rule) => fit_to_input(rule.task, query),
            None => fallback(query),
        }
    }
}

/// Asks an external tool (typically an LLM service speaking the tool
/// protocol) for the task name. The reply must be a text payload naming a
/// task type; anything else falls back to the lexicon.
pub struct ToolIntentParser {
    tool: ToolSpec,
    client: Arc<ToolClient>,
    fallback: RuleIntentParser,
}

impl ToolIntentParser {
    pub fn new(tool: ToolSpec, client: Arc<ToolClient>, fallback: RuleIntentParser) -> Self {
        Self { tool, client, fallback }
    }

    fn ask(&self, query: &Query) -> Option<TaskType> {
        let image = match &query.input {
            QueryInput::Image(image) => image.clone(),
            QueryInput::Video(video) => video.frames.first()?.clone(),
        };
        let prompt = StructuredPrompt::new(
            TaskType::ImageCaption,
            None,
            format!(
                "Classify the query into one task type. Reply with the task name only. Query: {}",
                query.text
            ),
            ScalarMap::new(),
        )
        .ok()?;
        let req = ToolRequest {
            request_id: self.client.next_request_id("intent"),
            task: TaskType::ImageCaption,
            prompt,
            image,
            params: ScalarMap::new(),
        };
        let res = self.client.invoke(&self.tool, &req);
        match res.payload {
            Some(Payload::Text(t)) if res.is_ok() => t.trim().to_ascii_lowercase().parse().ok(),
            _ => None,
        }
    }
}

impl IntentParser for ToolIntentParser {
    fn classify(&self, query: &Query) -> TaskType {
        match self.ask(query) {
            Some(task) => fit_to_input(task, query),
            None => {
                tracing::warn!(tool = %self.tool.tool_id, "intent backend gave no usable answer, using lexicon");
                self.fallback.classify(query)
            }
        }
    }
}

pub fn classify_intent(parser: &dyn IntentParser, query: &Query) -> TaskType {
    parser.classify(query)
}

/// Plane identification output, including the audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlaneIdentification {
    pub plane: PlaneLabel,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subplane: Option<PlaneLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subplane_confidence: Option<f64>,
    pub fused: Vec<FusedResult>,
    pub per_tool: Vec<ExpertResult>,
}

fn classify_image(
    task: TaskType,
    image: &ImageRef,
    registry: &Registry,
    client: &ToolClient,
) -> Result<(FusedResult, Vec<ExpertResult>), PlaneError> {
    let expert = registry.expert_for(task).ok_or(PlanError::MissingExpert(task))?;
    let prompt = StructuredPrompt::new(task, None, instructions(task, None, ""), ScalarMap::new())
        .map_err(|e| PlanError::Prompt(e.to_string()))?;
    let req = ToolRequest {
        request_id: format!("{}/{}", image.id, task),
        task,
        prompt,
        image: image.clone(),
        params: ScalarMap::new(),
    };
    let results = client.invoke_all(expert, &req)?;
    let fused = fusion::fuse(expert.fusion_rule, task, &results, &expert.weights())?;
    Ok((fused, results))
}

fn fused_label(f: &FusedResult) -> (PlaneLabel, f64) {
    let d = f.payload.as_distribution().expect("classification payload");
    let label = f.label.unwrap_or_else(|| d.argmax().0);
    (label, d.prob(label))
}

/// Fused argmax of the plane classifier; for brain views, also the
/// sub-plane when a sub-plane expert is registered. A plane hint on the
/// image replaces the classifier.
pub fn identify_plane(
    image: &ImageRef,
    registry: &Registry,
    client: &ToolClient,
) -> Result<PlaneIdentification, PlaneError> {
    let (mut plane, confidence, mut out_fused, mut per_tool) = match image.plane_hint {
        Some(hint) => (hint, 1.0, Vec::new(), Vec::new()),
        None => {
            let (fused, per_tool) =
                classify_image(TaskType::PlaneClassification, image, registry, client)?;
            let (plane, confidence) = fused_label(&fused);
            (plane, confidence, vec![fused], per_tool)
        }
    };
    let mut subplane = None;
    let mut subplane_confidence = None;
    if plane.is_brain_subplane() {
        subplane = Some(plane);
        subplane_confidence = Some(confidence);
        plane = PlaneLabel::Brain;
    } else if plane == PlaneLabel::Brain && registry.has_task(TaskType::BrainSubplaneClassification) {
        let (sub, sub_tools) =
            classify_image(TaskType::BrainSubplaneClassification, image, registry, client)?;
        let (label, conf) = fused_label(&sub);
        if label.is_brain_subplane() {
            subplane = Some(label);
            subplane_confidence = Some(conf);
        } else {
            tracing::warn!(%label, "sub-plane classifier returned a non sub-plane label");
        }
        out_fused.push(sub);
        per_tool.extend(sub_tools);
    }
    Ok(PlaneIdentification {
        plane,
        confidence,
        subplane,
        subplane_confidence,
        fused: out_fused,
        per_tool,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchPlan {
    pub task: TaskType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plane: Option<PlaneLabel>,
    pub prompt: StructuredPrompt,
    /// Sub-task per step, in execution order.
    pub tasks: Vec<TaskType>,
    /// Expert per step, parallel to `tasks`.
    pub experts: Vec<String>,
}

impl DispatchPlan {
    pub fn steps(&self) -> impl Iterator<Item = (TaskType, &str)> {
        self.tasks.iter().copied().zip(self.experts.iter().map(String::as_str))
    }
}

fn aop_keyword() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| {
        RegexBuilder::new(r"\b(aop|angle\s+of\s+progression|intrapartum|labou?r|progression)\b")
            .case_insensitive(true)
            .build()
            .expect("static regex")
    })
}

/// Sub-tasks of a caption request for a plane, in fixed order.
pub fn caption_suite(plane: Option<PlaneLabel>, query_text: &str) -> Vec<TaskType> {
    match plane {
        Some(p) if p == PlaneLabel::Brain || p.is_brain_subplane() => vec![
            TaskType::HeadSegmentation,
            TaskType::HCMeasurement,
            TaskType::GAEstimation,
        ],
        Some(PlaneLabel::Abdomen) => vec![
            TaskType::AbdomenSegmentation,
            TaskType::StomachSegmentation,
            TaskType::ACMeasurement,
        ],
        Some(PlaneLabel::Other | PlaneLabel::MaternalCervix) if aop_keyword().is_match(query_text) => {
            vec![TaskType::AoP]
        }
        _ => vec![TaskType::PlaneClassification],
    }
}

/// Prompt text for a task: a fixed template over task, plane and query.
pub fn instructions(task: TaskType, plane: Option<PlaneLabel>, query_text: &str) -> String {
    let plane = plane.map_or("unknown", PlaneLabel::as_str);
    let query = query_text.split_whitespace().collect::<Vec<_>>().join(" ");
    if query.is_empty() {
        format!("task={task}; plane={plane}")
    } else {
        format!("task={task}; plane={plane}; query={query}")
    }
}

/// Plans the experts to run for `(query, task, plane)`.
pub fn build_plan(
    query: &Query,
    task: TaskType,
    plane: Option<PlaneLabel>,
    registry: &Registry,
) -> Result<DispatchPlan, PlanError> {
    let tasks = match task {
        TaskType::ImageCaption => caption_suite(plane, &query.text),
        t => vec![t],
    };
    let experts = tasks
        .iter()
        .map(|&t| {
            registry
                .expert_for(t)
                .map(|e| e.expert_id.clone())
                .ok_or(PlanError::MissingExpert(t))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let prompt = StructuredPrompt::new(task, plane, instructions(task, plane, &query.text), ScalarMap::new())
        .map_err(|e| PlanError::Prompt(e.to_string()))?;
    Ok(DispatchPlan {
        task,
        plane,
        prompt,
        tasks,
        experts,
    })
}
