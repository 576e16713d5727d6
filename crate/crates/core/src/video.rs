//! Keyframe scoring and selection, and the video-level report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::coordinator::instructions;
use crate::domain::{
    ClassDistribution, ExpertResult, Measure, Payload, PatientMetadata, PlaneLabel, ScalarMap, StructuredPrompt,
    TaskType, VideoStream,
};
use crate::findings::FindingsBundle;
use crate::fusion;
use crate::protocol::{ExpertSpec, ToolClient, ToolRequest};
use crate::summarizer::{display_label, measure_name, num, round_to, CaptionBody, Flag, Report, ReportKind, Section, Summarizer};

/// Classes of the default keyframe scorer.
pub const DEFAULT_KEYFRAME_CLASSES: [PlaneLabel; 6] = [
    PlaneLabel::TransThalamic,
    PlaneLabel::TransVentricular,
    PlaneLabel::TransCerebellar,
    PlaneLabel::Abdomen,
    PlaneLabel::Femur,
    PlaneLabel::NonKey,
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VideoError {
    #[error("invalid keyframe policy: {0}")]
    Policy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KeyframePolicy {
    pub threshold: f64,
    pub min_gap: usize,
    pub top_m: usize,
}

impl KeyframePolicy {
    pub fn new(threshold: f64, min_gap: usize, top_m: usize) -> Result<Self, VideoError> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(VideoError::Policy(format!("threshold {threshold} must lie in (0, 1)")));
        }
        if min_gap == 0 {
            return Err(VideoError::Policy("min_gap must be at least 1 frame".into()));
        }
        if top_m == 0 {
            return Err(VideoError::Policy("top_m must be at least 1".into()));
        }
        Ok(Self {
            threshold,
            min_gap,
            top_m,
        })
    }
}

fn default_threshold() -> f64 {
    0.5
}

fn default_top_m() -> usize {
    3
}

fn default_stride() -> usize {
    1
}

fn default_classes() -> Vec<PlaneLabel> {
    DEFAULT_KEYFRAME_CLASSES.to_vec()
}

/// Video defaults; `min_gap` unset means one second of frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSettings {
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_gap: Option<usize>,
    #[serde(default = "default_top_m")]
    pub top_m: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default = "default_classes")]
    pub classes: Vec<PlaneLabel>,
}

impl Default for VideoSettings {
    fn default() -> Self {
        Self {
            threshold: default_threshold(),
            min_gap: None,
            top_m: default_top_m(),
            stride: default_stride(),
            classes: default_classes(),
        }
    }
}

impl VideoSettings {
    pub fn policy(&self, fps: f64) -> Result<KeyframePolicy, VideoError> {
        let min_gap = self.min_gap.unwrap_or_else(|| fps.round().max(1.0) as usize);
        KeyframePolicy::new(self.threshold, min_gap, self.top_m)
    }

    pub fn validate(&self) -> Result<(), VideoError> {
        self.policy(1.0)?;
        if self.stride == 0 {
            return Err(VideoError::Policy("stride must be at least 1".into()));
        }
        if !self.classes.contains(&PlaneLabel::NonKey) {
            return Err(VideoError::Policy("keyframe classes must include non_key".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame_index: usize,
    pub probs: ClassDistribution,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreOutcome {
    pub scores: Vec<FrameScore>,
    /// Sampled frames whose scoring failed.
    pub skipped: Vec<usize>,
    pub per_tool: Vec<ExpertResult>,
}

fn score_one(
    video: &VideoStream,
    index: usize,
    scorer: &ExpertSpec,
    client: &ToolClient,
    classes: &[PlaneLabel],
) -> Result<(ClassDistribution, Vec<ExpertResult>), (String, Vec<ExpertResult>)> {
    let task = TaskType::VideoSummary;
    let prompt = StructuredPrompt::new(task, None, instructions(task, None, ""), ScalarMap::new())
        .map_err(|e| (e.to_string(), vec![]))?;
    let req = ToolRequest {
        request_id: format!("{}/frame-{index}", video.id),
        task,
        prompt,
        image: video.frames[index].clone(),
        params: ScalarMap::new(),
    };
    let results = client.invoke_all(scorer, &req).map_err(|e| (e.to_string(), e.results.clone()))?;
    let fused = match fusion::fuse(scorer.fusion_rule, task, &results, &scorer.weights()) {
        Ok(f) => f,
        Err(e) => return Err((e.to_string(), results)),
    };
    let Some(d) = fused.payload.as_distribution() else {
        return Err(("scorer did not return a class distribution".into(), results));
    };
    if let Some(bad) = d.probs().keys().find(|l| !classes.contains(l)) {
        return Err((format!("scorer returned class {bad} outside the configured set"), results));
    }
    Ok((d.clone(), results))
}

/// Scores every `stride`-th frame. Frames whose scoring fails are skipped
/// and counted.
pub fn score_frames(
    video: &VideoStream,
    scorer: &ExpertSpec,
    client: &ToolClient,
    stride: usize,
    classes: &[PlaneLabel],
) -> ScoreOutcome {
    let mut out = ScoreOutcome::default();
    for index in (0..video.len()).step_by(stride.max(1)) {
        match score_one(video, index, scorer, client, classes) {
            Ok((probs, results)) => {
                out.scores.push(FrameScore {
                    frame_index: index,
                    probs,
                });
                out.per_tool.extend(results);
            }
            Err((reason, results)) => {
                tracing::warn!(frame = index, %reason, "frame scoring failed, skipping");
                out.skipped.push(index);
                out.per_tool.extend(results);
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub frame_index: usize,
    pub class: PlaneLabel,
    pub score: f64,
}

/// Selected keyframes, grouped by class, best score first within a class.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KeyframeSet {
    pub selections: Vec<Selection>,
}

impl KeyframeSet {
    pub fn is_empty(&self) -> bool {
        self.selections.is_empty()
    }

    pub fn len(&self) -> usize {
        self.selections.len()
    }

    pub fn for_class(&self, class: PlaneLabel) -> impl Iterator<Item = &Selection> {
        self.selections.iter().filter(move |s| s.class == class)
    }

    /// Selections in frame order.
    pub fn by_frame(&self) -> Vec<Selection> {
        let mut v = self.selections.clone();
        v.sort_by_key(|s| s.frame_index);
        v
    }
}

/// Greedy per-class selection with temporal non-maximum suppression.
///
/// A frame is a candidate for its argmax class when that class is not
/// `non_key` and its probability reaches the threshold. Candidates are taken
/// by descending probability (lower frame index first on ties) unless they
/// fall within `min_gap` frames of a frame already taken for the same class.
pub fn select_keyframes(scores: &[FrameScore], policy: &KeyframePolicy) -> KeyframeSet {
    let mut candidates: BTreeMap<PlaneLabel, Vec<(usize, f64)>> = BTreeMap::new();
    for s in scores {
        let (label, p) = s.probs.argmax();
        if label != PlaneLabel::NonKey && p >= policy.threshold {
            candidates.entry(label).or_default().push((s.frame_index, p));
        }
    }
    let mut selections = Vec::new();
    for (class, mut cands) in candidates {
        cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let mut taken: Vec<usize> = Vec::new();
        for (idx, p) in cands {
            if taken.len() == policy.top_m {
                break;
            }
            if taken.iter().all(|&t| idx.abs_diff(t) >= policy.min_gap) {
                taken.push(idx);
                selections.push(Selection {
                    frame_index: idx,
                    class,
                    score: p,
                });
            }
        }
    }
    KeyframeSet { selections }
}

/// One analysed keyframe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeFindings {
    pub selection: Selection,
    pub bundle: FindingsBundle,
    pub caption: CaptionBody,
}

/// Inputs of the video report besides the keyframe findings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoContext {
    pub video_id: String,
    pub scorer: String,
    pub frame_count: usize,
    pub stride: usize,
    pub policy: KeyframePolicy,
    pub scored: usize,
    pub skipped: Vec<usize>,
    pub metadata: PatientMetadata,
}

fn measure_task(m: Measure) -> TaskType {
    match m {
        Measure::HC => TaskType::HCMeasurement,
        Measure::AC => TaskType::ACMeasurement,
        Measure::AoP => TaskType::AoP,
        Measure::GA => TaskType::GAEstimation,
    }
}

struct Aggregate {
    value: f64,
    unit: String,
    frames: Vec<usize>,
    values: Vec<f64>,
}

/// Median of the keyframe-level values of `measure`, in frame order.
fn aggregate(keyframes: &[KeyframeFindings], measure: Measure) -> Option<Result<Aggregate, String>> {
    let task = measure_task(measure);
    let mut per_frame: Vec<(usize, ExpertResult)> = keyframes
        .iter()
        .filter_map(|k| {
            let b = k.bundle.biometry(measure)?;
            let r = ExpertResult::ok(
                format!("frame_{}", k.selection.frame_index),
                task,
                Payload::Biometry(b.clone()),
                b.confidence,
            )
            .ok()?;
            Some((k.selection.frame_index, r))
        })
        .collect();
    if per_frame.is_empty() {
        return None;
    }
    per_frame.sort_by_key(|(i, _)| *i);
    let results: Vec<ExpertResult> = per_frame.iter().map(|(_, r)| r.clone()).collect();
    Some(match fusion::fuse_scalars(task, &results) {
        Ok(f) => {
            let b = f.payload.as_biometry().expect("scalar fusion yields biometry");
            Ok(Aggregate {
                value: b.value,
                unit: b.unit.as_str().to_string(),
                frames: per_frame.iter().map(|(i, _)| *i).collect(),
                values: results
                    .iter()
                    .filter_map(|r| r.payload.as_ref()?.as_biometry().map(|b| round_to(b.value, 2)))
                    .collect(),
            })
        }
        Err(e) => Err(e.to_string()),
    })
}

impl Summarizer {
    /// Video-level report over analysed keyframes.
    pub fn synthesize_video(&self, keyframes: &[KeyframeFindings], ctx: &VideoContext) -> Report {
        let t = &self.template;
        let h = &t.video_sections;
        let mut flags = Vec::new();
        let mut keyframes = keyframes.to_vec();
        keyframes.sort_by_key(|k| k.selection.frame_index);

        let mut sections = Vec::new();
        let mut lines = Vec::new();
        let mut entries = Vec::new();
        for k in &keyframes {
            let score = round_to(k.selection.score, 3);
            lines.push(t.phrase(
                "keyframe",
                &[
                    ("frame", k.selection.frame_index.to_string()),
                    ("class", display_label(k.selection.class)),
                    ("score", num(score)),
                ],
            ));
            for f in &k.caption.flags {
                flags.push(Flag::new(&f.code, &format!("frame_{}:{}", k.selection.frame_index, f.subject)));
            }
            entries.push(json!({
                "frame_index": k.selection.frame_index,
                "class": k.selection.class,
                "score": score,
                "caption": k.caption,
            }));
        }
        if keyframes.is_empty() {
            lines.push(t.phrase("no_keyframes", &[]));
            flags.push(Flag::new("no_diagnostic_keyframes", "video"));
        }
        sections.push(Section {
            heading: h[0].clone(),
            body: lines.join(" "),
            payload: json!({
                "keyframes": entries,
                "threshold": ctx.policy.threshold,
                "min_gap": ctx.policy.min_gap,
                "top_m": ctx.policy.top_m,
            }),
        });

        let mut lines = Vec::new();
        let mut payload = Map::new();
        for m in [Measure::HC, Measure::AC, Measure::AoP] {
            let name = measure_name(m).to_string();
            match aggregate(&keyframes, m) {
                None => {}
                Some(Ok(a)) => {
                    let value = round_to(a.value, 2);
                    lines.push(t.phrase(
                        "video_biometry",
                        &[
                            ("measure", name),
                            ("value", num(value)),
                            ("unit", a.unit.clone()),
                            ("count", a.frames.len().to_string()),
                        ],
                    ));
                    payload.insert(
                        m.as_str().into(),
                        json!({"value": value, "unit": a.unit, "count": a.frames.len(), "frames": a.frames, "values": a.values}),
                    );
                }
                Some(Err(reason)) => {
                    lines.push(t.phrase("video_biometry_failed", &[("measure", name), ("reason", reason.clone())]));
                    flags.push(Flag::new("not_aggregated", m.as_str()));
                    payload.insert(m.as_str().into(), json!({ "error": reason }));
                }
            }
        }
        sections.push(self.video_section(&h[1], lines, Value::Object(payload)));

        let ga = aggregate(&keyframes, Measure::GA).and_then(Result::ok);
        let ga_us = ga.as_ref().map(|a| round_to(a.value, 2));
        let (lines, payload) = match &ga {
            Some(a) => (
                vec![t.phrase(
                    "video_ga",
                    &[("ga", num(ga_us.unwrap())), ("count", a.frames.len().to_string())],
                )],
                json!({"ga": ga_us, "count": a.frames.len(), "frames": a.frames, "values": a.values}),
            ),
            None => (vec![], json!({})),
        };
        sections.push(self.video_section(&h[2], lines, payload));

        let ga_lmp = ctx.metadata.lmp_gestational_age().map(|g| round_to(g, 2));
        let (lines, payload) = match (ga_lmp, ga_us) {
            (Some(lmp), Some(us)) => {
                let difference = round_to((us - lmp).abs(), 2);
                let tolerance = self.settings.ga_tolerance.at(lmp);
                let consistent = difference <= tolerance;
                if !consistent {
                    flags.push(Flag::new("ga_lmp_inconsistent", "ga"));
                }
                let args = [
                    ("ga_lmp", num(lmp)),
                    ("ga_us", num(us)),
                    ("difference", num(difference)),
                    ("tolerance", num(tolerance)),
                ];
                (
                    vec![t.phrase(if consistent { "lmp_consistent" } else { "lmp_inconsistent" }, &args)],
                    json!({"ga_lmp": lmp, "ga_us": us, "difference": difference, "tolerance": tolerance, "consistent": consistent}),
                )
            }
            (Some(lmp), None) => (vec![t.phrase("lmp_only", &[("ga_lmp", num(lmp))])], json!({ "ga_lmp": lmp })),
            _ => (vec![], json!({})),
        };
        sections.push(self.video_section(&h[3], lines, payload));

        let line = t.phrase(
            "video_audit",
            &[
                ("frames", ctx.scored.to_string()),
                ("stride", ctx.stride.to_string()),
                ("skipped", ctx.skipped.len().to_string()),
                ("keyframes", keyframes.len().to_string()),
            ],
        );
        sections.push(Section {
            heading: h[4].clone(),
            body: line,
            payload: json!({
                "video_id": ctx.video_id,
                "scorer": ctx.scorer,
                "frame_count": ctx.frame_count,
                "frames_scored": ctx.scored,
                "stride": ctx.stride,
                "skipped": ctx.skipped,
                "skipped_count": ctx.skipped.len(),
                "keyframe_count": keyframes.len(),
                "template_version": t.template_version,
            }),
        });
        self.wrap(ReportKind::VideoSummary, sections, flags)
    }

    fn video_section(&self, heading: &str, lines: Vec<String>, payload: Value) -> Section {
        Section {
            heading: heading.to_string(),
            body: if lines.is_empty() {
                self.template.phrase("not_assessed", &[])
            } else {
                lines.join(" ")
            },
            payload,
        }
    }
}
