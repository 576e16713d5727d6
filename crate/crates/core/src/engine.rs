//! End-to-end analysis of an image query or a video stream.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordinator::{
    build_plan, identify_plane, instructions, DispatchPlan, IntentParser, PlanError, PlaneError,
    PlaneIdentification, RuleIntentParser,
};
use crate::domain::{
    ExpertResult, FusedResult, ImageRef, Mask, Measure, Payload, PlaneLabel, Query, QueryInput, ScalarMap,
    StructuredPrompt, TaskType,
};
use crate::findings::FindingsBundle;
use crate::fusion::{self, FusionError, FusionRuleId};
use crate::geometry::{measure_aop, measure_hc_ac, AoPInputs};
use crate::growth::{reflection_safeguard, ChartSet};
use crate::protocol::{ExpertFailure, ExpertSpec, Registry, ToolClient, ToolRequest};
use crate::summarizer::{CaptionBody, CaptionContext, PlaneContext, Report, ReportKind, Summarizer};
use crate::video::{score_frames, select_keyframes, KeyframeFindings, KeyframeSet, ScoreOutcome, VideoContext, VideoSettings};

/// Structure names of the AoP mask set.
pub const SYMPHYSIS: &str = "symphysis";
pub const HEAD: &str = "head";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Expert(#[from] ExpertFailure),
    #[error("fusion for {task} failed: {source}")]
    Fusion { task: TaskType, source: FusionError },
}

impl EngineError {
    /// CLI exit status: 1 bad input, 2 planning, 3 expert failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            EngineError::Input(_) => 1,
            EngineError::Plan(_) => 2,
            EngineError::Expert(_) | EngineError::Fusion { .. } => 3,
        }
    }
}

impl From<PlaneError> for EngineError {
    fn from(e: PlaneError) -> Self {
        match e {
            PlaneError::Plan(p) => EngineError::Plan(p),
            PlaneError::Expert(x) => EngineError::Expert(x),
            PlaneError::Fusion(source) => EngineError::Fusion {
                task: TaskType::PlaneClassification,
                source,
            },
        }
    }
}

/// Result of analysing one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub task: TaskType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identification: Option<PlaneIdentification>,
    pub plan: DispatchPlan,
    /// Findings after the reflection safeguard.
    pub bundle: FindingsBundle,
    pub caption: CaptionBody,
    pub report: Report,
}

/// Result of summarizing a video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoAnalysis {
    pub task: TaskType,
    pub scorer: String,
    pub scoring: ScoreOutcome,
    pub keyframes: KeyframeSet,
    pub frames: Vec<(usize, Analysis)>,
    pub report: Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "input", rename_all = "snake_case")]
pub enum Outcome {
    Image(Box<Analysis>),
    Video(Box<VideoAnalysis>),
}

impl Outcome {
    pub fn report(&self) -> &Report {
        match self {
            Outcome::Image(a) => &a.report,
            Outcome::Video(v) => &v.report,
        }
    }
}

#[derive(Clone)]
pub struct Engine {
    pub registry: Registry,
    pub client: Arc<ToolClient>,
    pub charts: ChartSet,
    pub intent: Arc<dyn IntentParser>,
    pub summarizer: Summarizer,
    pub video: VideoSettings,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("experts", &self.registry.experts().len())
            .field("charts", &self.charts.keys().collect::<Vec<_>>())
            .field("video", &self.video)
            .finish()
    }
}

impl Engine {
    pub fn new(registry: Registry, client: Arc<ToolClient>, charts: ChartSet) -> Self {
        Self {
            registry,
            client,
            charts,
            intent: Arc::new(RuleIntentParser::default()),
            summarizer: Summarizer::default(),
            video: VideoSettings::default(),
        }
    }

    pub fn with_intent(mut self, intent: Arc<dyn IntentParser>) -> Self {
        self.intent = intent;
        self
    }

    pub fn with_summarizer(mut self, summarizer: Summarizer) -> Self {
        self.summarizer = summarizer;
        self
    }

    pub fn with_video(mut self, video: VideoSettings) -> Self {
        self.video = video;
        self
    }

    /// Image queries are routed by intent; video queries are summarized.
    pub fn run(&self, query: &Query) -> Result<Outcome, EngineError> {
        match &query.input {
            QueryInput::Image(image) => {
                let task = self.intent.classify(query);
                Ok(Outcome::Image(Box::new(self.analyze_image(&query.text, image, task)?)))
            }
            QueryInput::Video(_) => Ok(Outcome::Video(Box::new(self.summarize_video(query)?))),
        }
    }

    pub fn analyze(&self, query: &Query) -> Result<Analysis, EngineError> {
        match &query.input {
            QueryInput::Image(image) => self.analyze_image(&query.text, image, self.intent.classify(query)),
            QueryInput::Video(_) => Err(EngineError::Input("analyze expects an image query".into())),
        }
    }

    /// Runs `task` on one image: plane identification, plan, expert steps,
    /// reflection safeguard and caption.
    pub fn analyze_image(&self, text: &str, image: &ImageRef, task: TaskType) -> Result<Analysis, EngineError> {
        if task == TaskType::VideoSummary {
            return Err(EngineError::Input("video summary needs a video input".into()));
        }
        let needs_plane = task == TaskType::ImageCaption
            || image.plane_hint.is_some()
            || self.registry.has_task(TaskType::PlaneClassification);
        let identification = if needs_plane {
            Some(identify_plane(image, &self.registry, &self.client)?)
        } else {
            None
        };
        let plane = identification.as_ref().map(|i| i.plane);
        let plan_plane = identification.as_ref().map(|i| i.subplane.unwrap_or(i.plane));
        let query = Query::image(text, image.clone());
        let plan = build_plan(&query, task, plan_plane, &self.registry)?;

        let mut bundle = FindingsBundle::new(plane);
        if let Some(id) = &identification {
            bundle.subplane = id.subplane;
            bundle.fused.extend(id.fused.iter().cloned());
            bundle.per_tool.extend(id.per_tool.iter().cloned());
        }
        for (step_task, expert_id) in plan.steps() {
            if step_task.is_classification() && bundle.fused_for(step_task).is_some() {
                continue;
            }
            let expert = self
                .registry
                .expert(expert_id)
                .ok_or(PlanError::MissingExpert(step_task))?;
            let (fused, per_tool) = self.run_step(expert, image, plan_plane, text)?;
            bundle.fused.push(fused);
            bundle.per_tool.extend(per_tool);
        }
        if let Err(e) = bundle.validate() {
            return Err(EngineError::Input(format!("inconsistent findings: {e}")));
        }
        let bundle = reflection_safeguard(&bundle, &self.charts, self.summarizer.settings.reflection_band);
        let ctx = CaptionContext {
            task,
            experts: plan.experts.clone(),
            plane: PlaneContext {
                confidence: identification.as_ref().map(|i| i.confidence),
                subplane_confidence: identification.as_ref().and_then(|i| i.subplane_confidence),
                hinted: image.plane_hint.is_some(),
            },
        };
        let caption = self.summarizer.caption_body(&bundle, &self.charts, &ctx);
        let report = self
            .summarizer
            .wrap(ReportKind::ImageCaption, caption.sections.clone(), caption.flags.clone());
        Ok(Analysis {
            task,
            identification,
            plan,
            bundle,
            caption,
            report,
        })
    }

    /// Invokes one expert and fuses its tools' outputs. Measurement experts
    /// whose tools return masks get per-tool measurements derived here.
    pub fn run_step(
        &self,
        expert: &ExpertSpec,
        image: &ImageRef,
        plane: Option<PlaneLabel>,
        text: &str,
    ) -> Result<(FusedResult, Vec<ExpertResult>), EngineError> {
        let task = expert.task;
        let prompt = StructuredPrompt::new(task, plane, instructions(task, plane, text), ScalarMap::new())
            .map_err(|e| EngineError::Input(e.to_string()))?;
        let req = ToolRequest {
            request_id: format!("{}/{}", image.id, task),
            task,
            prompt,
            image: image.clone(),
            params: ScalarMap::new(),
        };
        let results = self.client.invoke_all(expert, &req)?;
        let fusion_err = |source| EngineError::Fusion { task, source };
        let measure = match task {
            TaskType::HCMeasurement => Some(Measure::HC),
            TaskType::ACMeasurement => Some(Measure::AC),
            TaskType::AoP => Some(Measure::AoP),
            _ => None,
        };
        let Some(measure) = measure else {
            let fused = fusion::fuse(expert.fusion_rule, task, &results, &expert.weights()).map_err(fusion_err)?;
            return Ok((fused, results));
        };
        if expert.fusion_rule == FusionRuleId::PixelMajority {
            let fused = fuse_then_measure(task, measure, &results, expert, image).map_err(fusion_err)?;
            return Ok((fused, results));
        }
        let derived: Vec<ExpertResult> = results.iter().map(|r| derive_biometry(r, measure, image)).collect();
        let ok = derived.iter().filter(|r| r.is_ok()).count();
        if ok < expert.min_successes {
            return Err(ExpertFailure {
                expert_id: expert.expert_id.clone(),
                ok,
                required: expert.min_successes,
                results: derived,
            }
            .into());
        }
        let fused = fusion::fuse(expert.fusion_rule, task, &derived, &expert.weights()).map_err(fusion_err)?;
        Ok((fused, derived))
    }

    /// Scores frames, selects keyframes, runs the caption suite on each and
    /// aggregates a video report.
    pub fn summarize_video(&self, query: &Query) -> Result<VideoAnalysis, EngineError> {
        let QueryInput::Video(video) = &query.input else {
            return Err(EngineError::Input("video summary needs a video input".into()));
        };
        let scorer = self
            .registry
            .expert_for(TaskType::VideoSummary)
            .ok_or(PlanError::MissingExpert(TaskType::VideoSummary))?;
        self.video.validate().map_err(|e| EngineError::Input(e.to_string()))?;
        let policy = self.video.policy(video.fps).map_err(|e| EngineError::Input(e.to_string()))?;
        let scoring = score_frames(video, scorer, &self.client, self.video.stride, &self.video.classes);
        let keyframes = select_keyframes(&scoring.scores, &policy);

        let mut frames = Vec::new();
        let mut findings = Vec::new();
        for sel in keyframes.by_frame() {
            let frame = video.frames[sel.frame_index].clone().with_plane_hint(sel.class);
            let analysis = self.analyze_image(&query.text, &frame, TaskType::ImageCaption)?;
            findings.push(KeyframeFindings {
                selection: sel,
                bundle: analysis.bundle.clone(),
                caption: analysis.caption.clone(),
            });
            frames.push((sel.frame_index, analysis));
        }
        let ctx = VideoContext {
            video_id: video.id.clone(),
            scorer: scorer.expert_id.clone(),
            frame_count: video.len(),
            stride: self.video.stride,
            policy,
            scored: scoring.scores.len(),
            skipped: scoring.skipped.clone(),
            metadata: video.metadata.clone(),
        };
        let report = self.summarizer.synthesize_video(&findings, &ctx);
        Ok(VideoAnalysis {
            task: TaskType::VideoSummary,
            scorer: scorer.expert_id.clone(),
            scoring,
            keyframes,
            frames,
            report,
        })
    }
}

fn measure_masks(measure: Measure, payload: &Payload, image: &ImageRef) -> Result<crate::domain::BiometryValue, String> {
    match (measure, payload) {
        (Measure::HC | Measure::AC, Payload::Mask(m)) => measure_hc_ac(m, image.pixel_spacing_mm, measure)
            .map(|c| c.value)
            .map_err(|e| e.to_string()),
        (Measure::AoP, Payload::MaskSet(set)) => {
            let get = |name: &str| {
                set.get(name)
                    .cloned()
                    .ok_or_else(|| format!("mask set has no {name:?} structure"))
            };
            let inputs = AoPInputs::new(get(SYMPHYSIS)?, get(HEAD)?).map_err(|e| e.to_string())?;
            measure_aop(&inputs).map_err(|e| e.to_string())
        }
        (_, p) => Err(format!("cannot measure {measure} from a {} payload", p.kind())),
    }
}

/// Per-tool biometry: biometry payloads pass through, masks are measured,
/// failures become error-status results.
fn derive_biometry(r: &ExpertResult, measure: Measure, image: &ImageRef) -> ExpertResult {
    let payload = match &r.payload {
        Some(p) if r.is_ok() => p,
        _ => return r.clone(),
    };
    if matches!(payload, Payload::Biometry(_)) {
        return r.clone();
    }
    match measure_masks(measure, payload, image) {
        Ok(b) => ExpertResult::ok(&r.tool_id, r.task, Payload::Biometry(b), r.confidence)
            .map(|x| x.with_latency(r.latency_ms))
            .unwrap_or_else(|e| ExpertResult::error(&r.tool_id, r.task, format!("measurement: {e}"))),
        Err(e) => ExpertResult::error(&r.tool_id, r.task, format!("measurement: {e}")).with_latency(r.latency_ms),
    }
}

/// Pixel-majority fusion of the tools' masks followed by a single
/// measurement on the fused mask.
fn fuse_then_measure(
    task: TaskType,
    measure: Measure,
    results: &[ExpertResult],
    expert: &ExpertSpec,
    image: &ImageRef,
) -> Result<FusedResult, FusionError> {
    let weights = expert.weights();
    let (payload, contributors) = if measure == Measure::AoP {
        let (set, contributors) = fusion::fuse_mask_sets(results, &weights)?;
        (Payload::MaskSet(set), contributors)
    } else {
        let mut ok: Vec<&ExpertResult> = results.iter().filter(|r| r.is_ok()).collect();
        ok.sort_by(|a, b| a.tool_id.cmp(&b.tool_id));
        let mut masks: Vec<(&Mask, f64)> = Vec::new();
        for r in &ok {
            match r.payload.as_ref() {
                Some(Payload::Mask(m)) => masks.push((m, weights.get(&r.tool_id).copied().unwrap_or(1.0))),
                other => {
                    return Err(FusionError::WrongPayload {
                        rule: "pixel_majority",
                        found: other.map_or("none", Payload::kind),
                    })
                }
            }
        }
        let fused = fusion::majority_mask(masks)?;
        (Payload::Mask(fused), ok.iter().map(|r| r.tool_id.clone()).collect())
    };
    let b = measure_masks(measure, &payload, image).map_err(|e| {
        FusionError::Domain(crate::domain::DomainError::InvalidBiometry(format!("fused mask: {e}")))
    })?;
    Ok(FusedResult::new(task, Payload::Biometry(b), contributors, FusionRuleId::PixelMajority.as_str())?)
}
