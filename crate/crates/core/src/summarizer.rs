//! Report synthesis from findings, and JSON / markdown rendering.

use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::{DateTime, SecondsFormat, Utc};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::domain::{Measure, Payload, PlaneLabel, TaskType, Unit};
use crate::findings::FindingsBundle;
use crate::growth::{reflection_safeguard, ChartSet, ReflectionBand};

pub const SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_TEMPLATE: &str = include_str!("../data/report_template.json");

const REQUIRED_PHRASES: &[&str] = &[
    "not_assessed",
    "plane",
    "plane_with_subplane",
    "plane_hinted",
    "plane_hinted_with_subplane",
    "segmentation",
    "biometry",
    "uncalibrated",
    "percentile_in_band",
    "percentile_out_of_band",
    "percentile_missing",
    "replaced",
    "unresolved",
    "ga",
    "hc_ga",
    "ga_hc_consistent",
    "ga_hc_mismatch",
    "audit",
    "no_keyframes",
    "keyframe",
    "video_biometry",
    "video_biometry_failed",
    "video_ga",
    "lmp_consistent",
    "lmp_inconsistent",
    "lmp_only",
    "video_audit",
];

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedClock(pub DateTime<Utc>);

impl FixedClock {
    pub fn parse(rfc3339: &str) -> Result<Self, chrono::ParseError> {
        Ok(Self(DateTime::parse_from_rfc3339(rfc3339)?.with_timezone(&Utc)))
    }
}

impl Clock for FixedClock {
    fn now(&self) -> DateTime<Utc> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    ImageCaption,
    VideoSummary,
}

impl ReportKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ReportKind::ImageCaption => "image_caption",
            ReportKind::VideoSummary => "video_summary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub heading: String,
    pub body: String,
    pub payload: Value,
}

/// A consistency annotation raised while building the report.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Flag {
    pub code: String,
    pub subject: String,
}

impl Flag {
    pub fn new(code: &str, subject: &str) -> Self {
        Self {
            code: code.into(),
            subject: subject.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub kind: ReportKind,
    pub sections: Vec<Section>,
    pub flags: Vec<Flag>,
    pub generated_at: String,
    pub engine_version: String,
}

impl Report {
    pub fn section(&self, heading: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.heading == heading)
    }

    pub fn has_flag(&self, code: &str) -> bool {
        self.flags.iter().any(|f| f.code == code)
    }
}

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("template is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("template: {0}")]
    Invalid(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Section headings and phrases for reports, loaded from a versioned file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTemplate {
    pub template_version: String,
    pub caption_sections: Vec<String>,
    pub video_sections: Vec<String>,
    pub titles: BTreeMap<String, String>,
    pub phrases: BTreeMap<String, String>,
}

impl ReportTemplate {
    pub fn from_json(text: &str) -> Result<Self, TemplateError> {
        let t: ReportTemplate = serde_json::from_str(text)?;
        if t.caption_sections.len() != 6 {
            return Err(TemplateError::Invalid("caption_sections needs 6 headings".into()));
        }
        if t.video_sections.len() != 5 {
            return Err(TemplateError::Invalid("video_sections needs 5 headings".into()));
        }
        for kind in [ReportKind::ImageCaption, ReportKind::VideoSummary] {
            if !t.titles.contains_key(kind.as_str()) {
                return Err(TemplateError::Invalid(format!("missing title for {}", kind.as_str())));
            }
        }
        if let Some(missing) = REQUIRED_PHRASES.iter().find(|k| !t.phrases.contains_key(**k)) {
            return Err(TemplateError::Invalid(format!("missing phrase {missing:?}")));
        }
        Ok(t)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, TemplateError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Fills `{name}` placeholders of a phrase.
    pub fn phrase(&self, key: &str, args: &[(&str, String)]) -> String {
        let mut out = self.phrases.get(key).cloned().unwrap_or_else(|| key.to_string());
        for (name, value) in args {
            out = out.replace(&format!("{{{name}}}"), value);
        }
        out
    }

    pub fn title(&self, kind: ReportKind) -> &str {
        self.titles.get(kind.as_str()).map_or(kind.as_str(), String::as_str)
    }
}

impl Default for ReportTemplate {
    fn default() -> Self {
        Self::from_json(DEFAULT_TEMPLATE).expect("shipped template is valid")
    }
}

/// Allowed gap between two gestational-age estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaTolerance {
    /// GA (weeks) below which the early tolerance applies.
    pub boundary_weeks: f64,
    pub early_weeks: f64,
    pub late_weeks: f64,
}

impl Default for GaTolerance {
    fn default() -> Self {
        Self {
            boundary_weeks: 14.0,
            early_weeks: 1.0,
            late_weeks: 2.0,
        }
    }
}

impl GaTolerance {
    pub fn at(&self, reference_ga: f64) -> f64 {
        if reference_ga < self.boundary_weeks {
            self.early_weeks
        } else {
            self.late_weeks
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportSettings {
    #[serde(default)]
    pub reflection_band: ReflectionBand,
    #[serde(default)]
    pub ga_tolerance: GaTolerance,
}

/// How the plane was obtained, for the Plane section.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PlaneContext {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subplane_confidence: Option<f64>,
    #[serde(default)]
    pub hinted: bool,
}

/// Everything besides the findings that a caption depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionContext {
    pub task: TaskType,
    pub experts: Vec<String>,
    pub plane: PlaneContext,
}

/// Rounds for display; the same rounded number goes into the payload so
/// every numeral in a body has a matching payload field.
pub fn round_to(x: f64, decimals: i32) -> f64 {
    let f = 10f64.powi(decimals);
    let r = (x * f).round() / f;
    if r == 0.0 {
        0.0
    } else {
        r
    }
}

pub fn num(x: f64) -> String {
    format!("{x}")
}

pub fn display_label(label: PlaneLabel) -> String {
    label.as_str().replace('_', "-")
}

fn structure_name(task: TaskType) -> &'static str {
    match task {
        TaskType::HeadSegmentation => "Head",
        TaskType::AbdomenSegmentation => "Abdomen",
        TaskType::StomachSegmentation => "Stomach",
        _ => "Structure",
    }
}

pub fn measure_name(m: Measure) -> &'static str {
    match m {
        Measure::HC => "HC",
        Measure::AC => "AC",
        Measure::AoP => "AoP",
        Measure::GA => "GA",
    }
}

/// The part of a caption that does not depend on the clock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionBody {
    pub sections: Vec<Section>,
    pub flags: Vec<Flag>,
}

/// Builds reports. Pure apart from the injected clock.
#[derive(Clone)]
pub struct Summarizer {
    pub template: ReportTemplate,
    pub settings: ReportSettings,
    pub clock: Arc<dyn Clock>,
    pub engine_version: String,
}

impl std::fmt::Debug for Summarizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Summarizer")
            .field("template_version", &self.template.template_version)
            .field("settings", &self.settings)
            .field("engine_version", &self.engine_version)
            .finish()
    }
}

impl Default for Summarizer {
    fn default() -> Self {
        Self::new(ReportTemplate::default(), ReportSettings::default(), Arc::new(SystemClock))
    }
}

impl Summarizer {
    pub fn new(template: ReportTemplate, settings: ReportSettings, clock: Arc<dyn Clock>) -> Self {
        Self {
            template,
            settings,
            clock,
            engine_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn with_engine_version(mut self, v: impl Into<String>) -> Self {
        self.engine_version = v.into();
        self
    }

    pub fn wrap(&self, kind: ReportKind, sections: Vec<Section>, mut flags: Vec<Flag>) -> Report {
        flags.sort();
        flags.dedup();
        Report {
            schema_version: SCHEMA_VERSION,
            kind,
            sections,
            flags,
            generated_at: self.clock.now().to_rfc3339_opts(SecondsFormat::Secs, true),
            engine_version: self.engine_version.clone(),
        }
    }

    /// Caption report for one image.
    pub fn synthesize_caption(&self, bundle: &FindingsBundle, charts: &ChartSet, ctx: &CaptionContext) -> Report {
        let body = self.caption_body(bundle, charts, ctx);
        self.wrap(ReportKind::ImageCaption, body.sections, body.flags)
    }

    /// Applies the reflection safeguard and renders the six caption sections.
    pub fn caption_body(&self, bundle: &FindingsBundle, charts: &ChartSet, ctx: &CaptionContext) -> CaptionBody {
        let bundle = reflection_safeguard(bundle, charts, self.settings.reflection_band);
        let mut flags = Vec::new();
        let h = &self.template.caption_sections;
        let ga = bundle.biometry(Measure::GA).map(|b| round_to(b.value, 2));
        let hc_ga = hc_implied_ga(&bundle, charts).map(|g| round_to(g, 2));
        let sections = vec![
            self.section(&h[0], self.plane_section(&bundle, &ctx.plane)),
            self.section(&h[1], self.findings_section(&bundle)),
            self.section(&h[2], self.biometry_section(&bundle, charts, &mut flags)),
            self.section(&h[3], self.ga_section(&bundle, hc_ga)),
            self.section(&h[4], self.consistency_section(ga, hc_ga, &mut flags)),
            self.section(&h[5], self.audit_section(&bundle, ctx)),
        ];
        flags.sort();
        flags.dedup();
        CaptionBody { sections, flags }
    }

    fn section(&self, heading: &str, (lines, payload): (Vec<String>, Value)) -> Section {
        let body = if lines.is_empty() {
            self.template.phrase("not_assessed", &[])
        } else {
            lines.join(" ")
        };
        Section {
            heading: heading.to_string(),
            body,
            payload,
        }
    }

    fn plane_section(&self, bundle: &FindingsBundle, pc: &PlaneContext) -> (Vec<String>, Value) {
        let Some(plane) = bundle.plane else {
            return (vec![], json!({ "plane": null }));
        };
        let t = &self.template;
        let conf = pc.confidence.map(|c| round_to(c, 3));
        let sub_conf = pc.subplane_confidence.map(|c| round_to(c, 3));
        let mut args = vec![("plane", display_label(plane))];
        if let Some(s) = bundle.subplane {
            args.push(("subplane", display_label(s)));
        }
        let line = match (pc.hinted, bundle.subplane) {
            (true, None) => t.phrase("plane_hinted", &args),
            (true, Some(_)) => t.phrase("plane_hinted_with_subplane", &args),
            (false, sub) => {
                args.push(("confidence", conf.map_or("unknown".into(), num)));
                match sub {
                    None => t.phrase("plane", &args),
                    Some(_) => {
                        args.push(("subplane_confidence", sub_conf.map_or("unknown".into(), num)));
                        t.phrase("plane_with_subplane", &args)
                    }
                }
            }
        };
        let payload = json!({
            "plane": plane,
            "subplane": bundle.subplane,
            "confidence": if pc.hinted { None } else { conf },
            "subplane_confidence": if pc.hinted { None } else { sub_conf },
            "source": if pc.hinted { "hint" } else { "classifier" },
        });
        (vec![line], payload)
    }

    fn findings_section(&self, bundle: &FindingsBundle) -> (Vec<String>, Value) {
        let mut lines = Vec::new();
        let mut payload = Map::new();
        for f in bundle.fused.iter().filter(|f| f.task.is_segmentation()) {
            let Payload::Mask(m) = &f.payload else { continue };
            let area = m.area();
            lines.push(self.template.phrase(
                "segmentation",
                &[("structure", structure_name(f.task).into()), ("area", area.to_string())],
            ));
            payload.insert(
                f.task.as_str().into(),
                json!({
                    "area_px": area,
                    "width": m.width(),
                    "height": m.height(),
                    "contributors": f.contributors,
                    "fusion_rule": f.fusion_rule,
                }),
            );
        }
        (lines, Value::Object(payload))
    }

    fn biometry_section(&self, bundle: &FindingsBundle, charts: &ChartSet, flags: &mut Vec<Flag>) -> (Vec<String>, Value) {
        let t = &self.template;
        let mut lines = Vec::new();
        let mut payload = Map::new();
        let ga = bundle.biometry(Measure::GA).map(|b| b.value);
        for measure in [Measure::HC, Measure::AC, Measure::AoP] {
            let Some(fused) = bundle
                .fused
                .iter()
                .find(|f| f.payload.as_biometry().is_some_and(|b| b.measure == measure))
            else {
                continue;
            };
            let b = fused.payload.as_biometry().expect("biometry");
            let name = measure_name(measure);
            let key = measure.as_str();
            let value = round_to(b.value, 2);
            let mut entry = json!({
                "value": value,
                "unit": b.unit,
                "method": b.method,
                "confidence": round_to(b.confidence, 3),
                "contributors": fused.contributors,
                "fusion_rule": fused.fusion_rule,
            });
            if b.unit == Unit::Pixels {
                lines.push(t.phrase("uncalibrated", &[("measure", name.into()), ("value", num(value))]));
                payload.insert(key.into(), entry);
                continue;
            }
            lines.push(t.phrase(
                "biometry",
                &[
                    ("measure", name.into()),
                    ("value", num(value)),
                    ("unit", b.unit.as_str().into()),
                    ("method", b.method.clone()),
                ],
            ));
            let annotation = bundle.annotations.get(key);
            if let Some(a) = annotation {
                if a.get("replaced_by_reflection").is_some() {
                    let original = round_to(a["original_value"].as_f64().unwrap_or(f64::NAN), 2);
                    let original_p = round_to(a["original_percentile"].as_f64().unwrap_or(f64::NAN), 1);
                    lines.push(t.phrase(
                        "replaced",
                        &[
                            ("measure", name.into()),
                            ("original", num(original)),
                            ("original_percentile", num(original_p)),
                            ("replacement", num(value)),
                            ("unit", b.unit.as_str().into()),
                        ],
                    ));
                    entry["reflection"] = json!({
                        "original_value": original,
                        "original_percentile": original_p,
                        "excluded": a["excluded"],
                    });
                    flags.push(Flag::new("replaced_by_reflection", key));
                } else if a.get("out_of_band").is_some() {
                    lines.push(t.phrase("unresolved", &[("measure", name.into())]));
                    entry["reflection"] = json!({ "resolved": false });
                    flags.push(Flag::new("out_of_band", key));
                }
            }
            if measure == Measure::AoP {
                payload.insert(key.into(), entry);
                continue;
            }
            let reason = match (charts.get(&measure), ga) {
                (None, _) => Err("no growth chart".to_string()),
                (_, None) => Err("no gestational age".to_string()),
                (Some(chart), Some(ga)) => chart.percentile_of(ga, b.value).map(|p| (p, ga)).map_err(|e| e.to_string()),
            };
            match reason {
                Ok((p, ga)) => {
                    let band = [2.5, 97.5];
                    let percentile = round_to(p.percentile, 1);
                    let ga = round_to(ga, 2);
                    let phrase = if p.in_band_2_5_97_5 {
                        "percentile_in_band"
                    } else {
                        flags.push(Flag::new("outside_validity_band", key));
                        "percentile_out_of_band"
                    };
                    lines.push(t.phrase(
                        phrase,
                        &[
                            ("measure", name.into()),
                            ("percentile", num(percentile)),
                            ("ga", num(ga)),
                            ("lower", num(band[0])),
                            ("upper", num(band[1])),
                        ],
                    ));
                    entry["percentile"] = json!(percentile);
                    entry["percentile_ga"] = json!(ga);
                    entry["in_band"] = json!(p.in_band_2_5_97_5);
                    entry["band"] = json!(band);
                }
                Err(reason) => {
                    lines.push(t.phrase(
                        "percentile_missing",
                        &[("measure", name.into()), ("reason", reason.clone())],
                    ));
                    entry["percentile_missing"] = json!(reason);
                }
            }
            payload.insert(key.into(), entry);
        }
        (lines, Value::Object(payload))
    }

    fn ga_section(&self, bundle: &FindingsBundle, hc_ga: Option<f64>) -> (Vec<String>, Value) {
        let mut lines = Vec::new();
        let mut payload = Map::new();
        if let Some(b) = bundle.biometry(Measure::GA) {
            let ga = round_to(b.value, 2);
            lines.push(self.template.phrase("ga", &[("ga", num(ga)), ("method", b.method.clone())]));
            payload.insert("ga".into(), json!(ga));
            payload.insert("method".into(), json!(b.method));
        }
        if let Some(g) = hc_ga {
            lines.push(self.template.phrase("hc_ga", &[("hc_ga", num(g))]));
            payload.insert("hc_implied_ga".into(), json!(g));
        }
        (lines, Value::Object(payload))
    }

    fn consistency_section(&self, ga: Option<f64>, hc_ga: Option<f64>, flags: &mut Vec<Flag>) -> (Vec<String>, Value) {
        let (Some(ga), Some(hc_ga)) = (ga, hc_ga) else {
            return (vec![], json!({}));
        };
        let difference = round_to((ga - hc_ga).abs(), 2);
        let tolerance = self.settings.ga_tolerance.at(ga);
        let consistent = difference <= tolerance;
        if !consistent {
            flags.push(Flag::new("ga_hc_mismatch", "ga"));
        }
        let line = self.template.phrase(
            if consistent { "ga_hc_consistent" } else { "ga_hc_mismatch" },
            &[
                ("hc_ga", num(hc_ga)),
                ("ga", num(ga)),
                ("difference", num(difference)),
                ("tolerance", num(tolerance)),
            ],
        );
        let payload = json!({
            "ga": ga,
            "hc_implied_ga": hc_ga,
            "difference": difference,
            "tolerance": tolerance,
            "consistent": consistent,
        });
        (vec![line], payload)
    }

    fn audit_section(&self, bundle: &FindingsBundle, ctx: &CaptionContext) -> (Vec<String>, Value) {
        let failed = bundle.per_tool.iter().filter(|r| !r.is_ok()).count();
        let calls = bundle.per_tool.len();
        let line = self.template.phrase(
            "audit",
            &[
                ("task", ctx.task.as_str().into()),
                ("experts", ctx.experts.len().to_string()),
                ("calls", calls.to_string()),
                ("failed", failed.to_string()),
            ],
        );
        let tools: Vec<Value> = bundle
            .per_tool
            .iter()
            .map(|r| {
                json!({
                    "tool_id": r.tool_id,
                    "task": r.task,
                    "status": if r.is_ok() { "ok" } else { "error" },
                    "error": r.error_message(),
                    "latency_ms": r.latency_ms,
                })
            })
            .collect();
        let payload = json!({
            "task": ctx.task,
            "experts": ctx.experts,
            "expert_count": ctx.experts.len(),
            "tool_calls": calls,
            "failed": failed,
            "tools": tools,
            "template_version": self.template.template_version,
        });
        (vec![line], payload)
    }
}

/// GA at which the HC chart's median equals the measured HC.
pub fn hc_implied_ga(bundle: &FindingsBundle, charts: &ChartSet) -> Option<f64> {
    let hc = bundle.biometry(Measure::HC).filter(|b| b.unit == Unit::Mm)?;
    charts.get(&Measure::HC)?.ga_for_median(hc.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Markdown,
}

/// Deterministic bytes for a report: sorted-key JSON or the markdown layout.
pub fn render(report: &Report, format: Format) -> Vec<u8> {
    match format {
        Format::Json => {
            let v = serde_json::to_value(report).expect("report serializes");
            let mut s = serde_json::to_string_pretty(&v).expect("value serializes");
            s.push('\n');
            s.into_bytes()
        }
        Format::Markdown => render_markdown(report, &ReportTemplate::default()).into_bytes(),
    }
}

pub fn parse_report(bytes: &[u8]) -> serde_json::Result<Report> {
    serde_json::from_slice(bytes)
}

/// The markdown metadata line; it carries no findings.
pub fn metadata_line(report: &Report) -> String {
    format!("_Generated {} by engine {}._", report.generated_at, report.engine_version)
}

pub fn render_markdown(report: &Report, template: &ReportTemplate) -> String {
    let mut out = format!("# {}\n\n{}\n", template.title(report.kind), metadata_line(report));
    for s in &report.sections {
        out.push_str(&format!("\n## {}\n\n{}\n", s.heading, s.body));
        if let Some(frames) = s.payload.get("keyframes").and_then(Value::as_array) {
            for k in frames {
                let Some(sections) = k.pointer("/caption/sections").and_then(Value::as_array) else {
                    continue;
                };
                out.push_str(&format!("\n### Frame {}\n", k["frame_index"]));
                for sub in sections {
                    let heading = sub["heading"].as_str().unwrap_or_default();
                    let body = sub["body"].as_str().unwrap_or_default();
                    out.push_str(&format!("\n- **{heading}**: {body}\n"));
                }
            }
        }
    }
    out.push_str("\n## Flags\n\n");
    if report.flags.is_empty() {
        out.push_str("None.\n");
    }
    for f in &report.flags {
        out.push_str(&format!("- {} ({})\n", f.code, f.subject));
    }
    out
}

fn numeral_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+(?:\.\d+)?").expect("static regex"))
}

/// Every decimal numeral in `text`, in order.
pub fn numerals(text: &str) -> Vec<f64> {
    numeral_re()
        .find_iter(text)
        .filter_map(|m| m.as_str().parse().ok())
        .collect()
}

/// Every JSON number inside `value`.
pub fn payload_numbers(value: &Value) -> Vec<f64> {
    let mut out = Vec::new();
    fn walk(v: &Value, out: &mut Vec<f64>) {
        match v {
            Value::Number(n) => out.extend(n.as_f64()),
            Value::Array(a) => a.iter().for_each(|x| walk(x, out)),
            Value::Object(o) => o.values().for_each(|x| walk(x, out)),
            _ => {}
        }
    }
    walk(value, &mut out);
    out
}

/// Optional prose rewrite of section bodies (e.g. an LLM pass).
pub trait Polisher: Send + Sync {
    fn polish(&self, heading: &str, body: &str) -> Option<String>;
}

fn same_numerals(a: &str, b: &str) -> bool {
    let key = |t: &str| {
        let mut v: Vec<String> = numerals(t).into_iter().map(|x| x.to_string()).collect();
        v.sort();
        v
    };
    key(a) == key(b)
}

/// Runs a polisher over every body. A rewrite is kept only when it carries
/// exactly the same numbers; payloads and flags are never touched. Returns
/// the headings whose rewrite was rejected.
pub fn polish(report: &Report, polisher: &dyn Polisher) -> (Report, Vec<String>) {
    let mut out = report.clone();
    let mut rejected = Vec::new();
    for s in &mut out.sections {
        let Some(new_body) = polisher.polish(&s.heading, &s.body) else {
            continue;
        };
        if !new_body.trim().is_empty() && same_numerals(&s.body, &new_body) {
            s.body = new_body;
        } else {
            tracing::warn!(heading = %s.heading, "polished text changed the numbers, keeping the template text");
            rejected.push(s.heading.clone());
        }
    }
    (out, rejected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{BiometryValue, ExpertResult, FusedResult, Mask};
    use crate::growth::GrowthChart;

    const TWO_ROWS: &str = "ga_weeks,p2.5,p5,p10,p25,p50,p75,p90,p95,p97.5\n\
        20,160,163,167,171,175,179,183,187,190\n\
        21,170,173,177,181,185,189,193,197,200\n";

    fn charts() -> ChartSet {
        ChartSet::from([(Measure::HC, GrowthChart::from_csv(Measure::HC, TWO_ROWS.as_bytes()).unwrap())])
    }

    fn summarizer() -> Summarizer {
        Summarizer::new(
            ReportTemplate::default(),
            ReportSettings::default(),
            Arc::new(FixedClock::parse("2026-01-01T00:00:00Z").unwrap()),
        )
        .with_engine_version("test")
    }

    fn biometry(tool: &str, m: Measure, v: f64) -> ExpertResult {
        let unit = m.natural_unit();
        let task = match m {
            Measure::HC => TaskType::HCMeasurement,
            Measure::AC => TaskType::ACMeasurement,
            Measure::AoP => TaskType::AoP,
            Measure::GA => TaskType::GAEstimation,
        };
        ExpertResult::ok(tool, task, Payload::Biometry(BiometryValue::new(m, v, unit, "mock", 1.0).unwrap()), 1.0)
            .unwrap()
    }

    fn fused(results: &[ExpertResult]) -> FusedResult {
        crate::fusion::fuse_scalars(results[0].task, results).unwrap()
    }

    fn brain_bundle(hc: &[f64], ga: f64) -> FindingsBundle {
        let mut b = FindingsBundle::new(Some(PlaneLabel::Brain));
        b.subplane = Some(PlaneLabel::TransThalamic);
        let head = Mask::from_fn(16, 16, |x, y| x < 4 && y < 5).unwrap();
        let seg = ExpertResult::ok("seg", TaskType::HeadSegmentation, Payload::Mask(head.clone()), 1.0).unwrap();
        b.fused.push(
            FusedResult::new(TaskType::HeadSegmentation, Payload::Mask(head), vec!["seg".into()], "pixel_majority")
                .unwrap(),
        );
        b.per_tool.push(seg);
        let hcs: Vec<ExpertResult> =
            hc.iter().enumerate().map(|(i, v)| biometry(&format!("hc{i}"), Measure::HC, *v)).collect();
        b.fused.push(fused(&hcs));
        b.per_tool.extend(hcs);
        let g = biometry("ga", Measure::GA, ga);
        b.fused.push(fused(&[g.clone()]));
        b.per_tool.push(g);
        b
    }

    fn ctx() -> CaptionContext {
        CaptionContext {
            task: TaskType::ImageCaption,
            experts: vec!["head".into(), "hc".into(), "ga".into()],
            plane: PlaneContext {
                confidence: Some(1.0),
                subplane_confidence: Some(0.9),
                hinted: false,
            },
        }
    }

    #[test]
    fn in_band_caption_has_six_sections_and_no_flags() {
        let r = summarizer().synthesize_caption(&brain_bundle(&[175.0], 20.0), &charts(), &ctx());
        let headings: Vec<&str> = r.sections.iter().map(|s| s.heading.as_str()).collect();
        assert_eq!(headings, ["Plane", "Findings", "Biometry", "Gestational age", "Consistency", "Audit"]);
        assert!(r.flags.is_empty(), "{:?}", r.flags);
        let bio = &r.section("Biometry").unwrap().payload["hc"];
        assert_eq!(bio["percentile"], json!(50.0));
        assert_eq!(bio["in_band"], json!(true));
        assert_eq!(r.section("Findings").unwrap().body, "Head segmented: 20 px.");
        assert!(r.section("Consistency").unwrap().payload["consistent"].as_bool().unwrap());
        assert_eq!(r.generated_at, "2026-01-01T00:00:00Z");
    }

    #[test]
    fn reflection_replacement_is_flagged() {
        let r = summarizer().synthesize_caption(&brain_bundle(&[400.0, 405.0, 182.0], 20.0), &charts(), &ctx());
        assert!(r.has_flag("replaced_by_reflection"));
        let bio = &r.section("Biometry").unwrap().payload["hc"];
        assert_eq!(bio["reflection"]["original_value"], json!(400.0));
        assert_eq!(bio["reflection"]["excluded"], json!(["hc0", "hc1"]));
        assert_eq!(bio["value"], json!(182.0));
    }

    #[test]
    fn empty_bundle_is_not_assessed() {
        let b = FindingsBundle::new(Some(PlaneLabel::Femur));
        let c = CaptionContext {
            task: TaskType::ImageCaption,
            experts: vec![],
            plane: PlaneContext::default(),
        };
        let r = summarizer().synthesize_caption(&b, &charts(), &c);
        assert_eq!(r.sections.len(), 6);
        assert_eq!(r.section("Findings").unwrap().body, "Not assessed.");
        assert!(r.section("Plane").unwrap().body.starts_with("femur"));
    }

    #[test]
    fn rendering_is_deterministic_and_round_trips() {
        let r = summarizer().synthesize_caption(&brain_bundle(&[400.0, 405.0, 182.0], 20.0), &charts(), &ctx());
        let j = render(&r, Format::Json);
        assert_eq!(j, render(&r, Format::Json));
        assert_eq!(render(&parse_report(&j).unwrap(), Format::Json), j);
        assert_eq!(render(&r, Format::Markdown), render(&r, Format::Markdown));
    }

    #[test]
    fn markdown_numerals_come_from_payloads() {
        for hc in [vec![175.0], vec![400.0, 405.0, 182.0], vec![150.0], vec![187.3]] {
            let r = summarizer().synthesize_caption(&brain_bundle(&hc, 20.4), &charts(), &ctx());
            let md = String::from_utf8(render(&r, Format::Markdown)).unwrap();
            let md = md.replace(&metadata_line(&r), "");
            let known: Vec<f64> = r.sections.iter().flat_map(|s| payload_numbers(&s.payload)).collect();
            for n in numerals(&md) {
                assert!(known.contains(&n), "{n} in markdown has no payload field\n{md}");
            }
        }
    }

    struct Rewrite(&'static str);

    impl Polisher for Rewrite {
        fn polish(&self, heading: &str, body: &str) -> Option<String> {
            (heading == "Gestational age").then(|| format!("{} {}", self.0, body))
        }
    }

    #[test]
    fn polish_keeps_numbers() {
        let r = summarizer().synthesize_caption(&brain_bundle(&[175.0], 20.0), &charts(), &ctx());
        let (ok, rejected) = polish(&r, &Rewrite("Dating:"));
        assert!(rejected.is_empty());
        assert!(ok.section("Gestational age").unwrap().body.starts_with("Dating:"));
        assert_eq!(ok.flags, r.flags);
        let (bad, rejected) = polish(&r, &Rewrite("About 3 weeks off:"));
        assert_eq!(rejected, vec!["Gestational age".to_string()]);
        assert_eq!(bad, r);
    }

    #[test]
    fn template_requires_all_phrases() {
        let mut v: Value = serde_json::from_str(DEFAULT_TEMPLATE).unwrap();
        v["phrases"].as_object_mut().unwrap().remove("ga");
        assert!(ReportTemplate::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn ga_tolerance_switches_at_boundary() {
        let t = GaTolerance::default();
        assert_eq!((t.at(13.9), t.at(14.0)), (1.0, 2.0));
    }
}
