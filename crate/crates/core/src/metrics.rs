//! Evaluation metrics for classification, segmentation and biometry, plus
//! the growth-chart validity rate and a JSON-lines manifest format.
//!
//! Averages are taken over values sorted first, so every report is
//! bit-identical under any permutation of the cases.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::domain::{ClassDistribution, Mask, PlaneLabel, TaskType};
use crate::geometry::boundary_pixels;
use crate::growth::GrowthChart;
use crate::imageio::load_mask_png;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("no cases to evaluate")]
    Empty,
    #[error("case {id}: {reason}")]
    Case { id: String, reason: String },
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("task {0} has no evaluation metrics")]
    UnsupportedTask(TaskType),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub n: usize,
    pub values: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl MetricReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    /// Two aligned columns, metric names then values.
    pub fn to_table(&self) -> String {
        let width = self
            .values
            .keys()
            .map(String::len)
            .chain(std::iter::once("metric".len()))
            .max()
            .unwrap_or(0);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  value", "metric");
        let _ = writeln!(out, "{:<width$}  {}", "n", self.n);
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k:<width$}  {v:.6}");
        }
        for note in &self.notes {
            let _ = writeln!(out, "# {note}");
        }
        out
    }

    fn merge(&mut self, other: MetricReport) {
        self.values.extend(other.values);
        self.notes.extend(other.notes);
    }
}

/// Order-independent mean.
fn mean(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Linear-interpolated quantile of `values`, `q` in [0, 1].
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Median with the even-count convention of averaging the middle pair.
pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

// Classification

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClassPrediction {
    Label(PlaneLabel),
    Distribution(ClassDistribution),
}

impl ClassPrediction {
    pub fn label(&self) -> PlaneLabel {
        match self {
            ClassPrediction::Label(l) => *l,
            ClassPrediction::Distribution(d) => d.argmax().0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationCase {
    pub pred: ClassPrediction,
    pub truth: PlaneLabel,
}

/// `counts[t][p]` over `labels` (truth rows, prediction columns).
pub fn confusion_matrix(labels: &[PlaneLabel], cases: &[(PlaneLabel, PlaneLabel)]) -> Vec<Vec<u64>> {
    let idx: BTreeMap<PlaneLabel, usize> = labels.iter().enumerate().map(|(i, l)| (*l, i)).collect();
    let mut m = vec![vec![0u64; labels.len()]; labels.len()];
    for (t, p) in cases {
        m[idx[t]][idx[p]] += 1;
    }
    m
}

/// Cohen's κ from a square confusion matrix. When chance agreement is total
/// (a single class on both sides) agreement is perfect and κ is 1.
///
/// Computed as (N·Σdiag − Σrow·col) / (N² − Σrow·col) in integers, so a
/// single rounding happens at the final division.
pub fn cohen_kappa(confusion: &[Vec<u64>]) -> f64 {
    let k = confusion.len();
    let total: u128 = confusion.iter().flatten().map(|&c| c as u128).sum();
    if total == 0 {
        return 0.0;
    }
    let diag: u128 = (0..k).map(|i| confusion[i][i] as u128).sum();
    let chance: u128 = (0..k)
        .map(|i| {
            let row: u128 = confusion[i].iter().map(|&c| c as u128).sum();
            let col: u128 = confusion.iter().map(|r| r[i] as u128).sum();
            row * col
        })
        .sum();
    let denom = total * total - chance;
    if denom == 0 {
        return 1.0;
    }
    (total as i128 * diag as i128 - chance as i128) as f64 / denom as f64
}

/// Mann-Whitney AUROC for one binary problem; ties count one half.
/// `None` without both positives and negatives.
pub fn auroc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks (1-based) over tie groups.
    let mut ranks = vec![0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = (0..scores.len()).filter(|&i| positive[i]).map(|i| ranks[i]).sum();
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

pub fn classification_metrics(cases: &[ClassificationCase]) -> Result<MetricReport, MetricsError> {
    if cases.is_empty() {
        return Err(MetricsError::Empty);
    }
    let pairs: Vec<(PlaneLabel, PlaneLabel)> = cases.iter().map(|c| (c.truth, c.pred.label())).collect();
    let labels: Vec<PlaneLabel> = pairs
        .iter()
        .flat_map(|&(t, p)| [t, p])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let cm = confusion_matrix(&labels, &pairs);
    let n = cases.len() as f64;
    let correct: u64 = (0..labels.len()).map(|i| cm[i][i]).sum();

    let (mut precisions, mut recalls, mut f1s) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..labels.len() {
        let tp = cm[i][i] as f64;
        let predicted: u64 = cm.iter().map(|r| r[i]).sum();
        let actual: u64 = cm[i].iter().sum();
        let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let r = if actual == 0 { 0.0 } else { tp / actual as f64 };
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        precisions.push(p);
        recalls.push(r);
        f1s.push(f);
    }

    let mut report = MetricReport {
        n: cases.len(),
        ..Default::default()
    };
    report.values.insert("accuracy".into(), correct as f64 / n);
    report.values.insert("precision_macro".into(), mean(&precisions));
    report.values.insert("recall_macro".into(), mean(&recalls));
    report.values.insert("f1_macro".into(), mean(&f1s));
    report.values.insert("kappa".into(), cohen_kappa(&cm));

    let dists: Option<Vec<&ClassDistribution>> = cases
        .iter()
        .map(|c| match &c.pred {
            ClassPrediction::Distribution(d) => Some(d),
            ClassPrediction::Label(_) => None,
        })
        .collect();
    match dists {
        None => report
            .notes
            .push("auroc omitted: predictions are labels, not distributions".into()),
        Some(dists) => {
            let mut per_class = Vec::new();
            for &label in &labels {
                let scores: Vec<f64> = dists.iter().map(|d| d.prob(label)).collect();
                let positive: Vec<bool> = cases.iter().map(|c| c.truth == label).collect();
                match auroc_binary(&scores, &positive) {
                    Some(a) => per_class.push(a),
                    None => report
                        .notes
                        .push(format!("auroc skips class {label}: needs positives and negatives")),
                }
            }
            if per_class.is_empty() {
                report.notes.push("auroc omitted: no class has both outcomes".into());
            } else {
                report.values.insert("auroc_macro".into(), mean(&per_class));
            }
        }
    }
    Ok(report)
}

// Segmentation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationScores {
    pub dsc: f64,
    pub iou: f64,
    pub ppv: f64,
    pub sensitivity: f64,
    /// `None` when exactly one of the masks is empty.
    pub hd95: Option<f64>,
    pub assd: Option<f64>,
    pub hausdorff: Option<f64>,
}

/// Exact squared Euclidean distance transform to the `true` cells of a
/// `width × height` grid; cells with no feature anywhere get `+∞`.
pub fn squared_distance_transform(width: usize, height: usize, features: &[bool]) -> Vec<f64> {
    let mut grid: Vec<f64> = features
        .iter()
        .map(|&f| if f { 0.0 } else { f64::INFINITY })
        .collect();
    let mut col = vec![0f64; height];
    let mut out = vec![0f64; height.max(width)];
    for x in 0..width {
        for y in 0..height {
            col[y] = grid[y * width + x];
        }
        lower_envelope(&col, &mut out[..height]);
        for y in 0..height {
            grid[y * width + x] = out[y];
        }
    }
    let mut row = vec![0f64; width];
    for y in 0..height {
        row.copy_from_slice(&grid[y * width..(y + 1) * width]);
        lower_envelope(&row, &mut out[..width]);
        grid[y * width..(y + 1) * width].copy_from_slice(&out[..width]);
    }
    grid
}

/// One-dimensional distance transform of a sampled function (lower envelope
/// of parabolas rooted at the finite samples).
fn lower_envelope(f: &[f64], out: &mut [f64]) {
    let roots: Vec<usize> = (0..f.len()).filter(|&i| f[i].is_finite()).collect();
    if roots.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut v: Vec<usize> = Vec::with_capacity(roots.len());
    let mut z: Vec<f64> = Vec::with_capacity(roots.len() + 1);
    v.push(roots[0]);
    z.push(f64::NEG_INFINITY);
    z.push(f64::INFINITY);
    let key = |q: usize| f[q] + (q * q) as f64;
    for &q in &roots[1..] {
        let mut s;
        loop {
            let p = *v.last().unwrap();
            s = (key(q) - key(p)) / (2.0 * (q as f64 - p as f64));
            if s <= z[v.len() - 1] {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        v.push(q);
        *z.last_mut().unwrap() = s;
        z.push(f64::INFINITY);
    }
    let mut k = 0;
    for (q, slot) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *slot = d * d + f[v[k]];
    }
}

/// Pooled symmetric boundary-to-boundary distances: every boundary pixel of
/// `a` to the nearest boundary pixel of `b`, then the reverse.
pub fn pooled_boundary_distances(a: &Mask, b: &Mask) -> Vec<f64> {
    let (w, h) = (a.width() as usize, a.height() as usize);
    let ba = boundary_pixels(a);
    let bb = boundary_pixels(b);
    let field = |pts: &[(u32, u32)]| {
        let mut feat = vec![false; w * h];
        for &(x, y) in pts {
            feat[y as usize * w + x as usize] = true;
        }
        squared_distance_transform(w, h, &feat)
    };
    let da = field(&ba);
    let db = field(&bb);
    let mut out = Vec::with_capacity(ba.len() + bb.len());
    out.extend(ba.iter().map(|&(x, y)| db[y as usize * w + x as usize].sqrt()));
    out.extend(bb.iter().map(|&(x, y)| da[y as usize * w + x as usize].sqrt()));
    out
}

/// Scores for one prediction (`pred`, A) against truth (`truth`, B).
pub fn segmentation_scores(pred: &Mask, truth: &Mask) -> Result<SegmentationScores, String> {
    if !pred.same_dims(truth) {
        return Err(format!(
            "prediction is {}x{}, truth is {}x{}",
            pred.width(),
            pred.height(),
            truth.width(),
            truth.height()
        ));
    }
    let (a, b) = (pred.area() as f64, truth.area() as f64);
    if a == 0.0 && b == 0.0 {
        return Ok(SegmentationScores {
            dsc: 1.0,
            iou: 1.0,
            ppv: 1.0,
            sensitivity: 1.0,
            hd95: Some(0.0),
            assd: Some(0.0),
            hausdorff: Some(0.0),
        });
    }
    let inter = pred.intersection_area(truth) as f64;
    let union = a + b - inter;
    let ratio = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
    let (hd95, assd, hausdorff) = if a == 0.0 || b == 0.0 {
        (None, None, None)
    } else {
        let d = pooled_boundary_distances(pred, truth);
        let max = d.iter().copied().fold(0.0, f64::max);
        (Some(quantile(&d, 0.95)), Some(mean(&d)), Some(max))
    };
    Ok(SegmentationScores {
        dsc: 2.0 * inter / (a + b),
        iou: inter / union,
        ppv: ratio(inter, a),
        sensitivity: ratio(inter, b),
        hd95,
        assd,
        hausdorff,
    })
}

pub fn segmentation_metrics(pairs: &[(String, Mask, Mask)]) -> Result<MetricReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut scores = Vec::with_capacity(pairs.len());
    for (id, pred, truth) in pairs {
        scores.push(segmentation_scores(pred, truth).map_err(|reason| MetricsError::Case {
            id: id.clone(),
            reason,
        })?);
    }
    let col = |f: fn(&SegmentationScores) -> f64| scores.iter().map(f).collect::<Vec<_>>();
    let mut report = MetricReport {
        n: pairs.len(),
        ..Default::default()
    };
    report.values.insert("dsc".into(), mean(&col(|s| s.dsc)));
    report.values.insert("iou".into(), mean(&col(|s| s.iou)));
    report.values.insert("ppv".into(), mean(&col(|s| s.ppv)));
    report.values.insert("sensitivity".into(), mean(&col(|s| s.sensitivity)));
    let hd: Vec<f64> = scores.iter().filter_map(|s| s.hd95).collect();
    let assd: Vec<f64> = scores.iter().filter_map(|s| s.assd).collect();
    let excluded = scores.len() - hd.len();
    if excluded > 0 {
        report.notes.push(format!(
            "{excluded} case(s) with exactly one empty mask excluded from hd95/assd"
        ));
    }
    if !hd.is_empty() {
        report.values.insert("hd95".into(), mean(&hd));
        report.values.insert("assd".into(), mean(&assd));
    }
    Ok(report)
}

// Biometry

pub fn biometry_metrics(pairs: &[(f64, f64)]) -> Result<MetricReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut abs = Vec::with_capacity(pairs.len());
    let mut rel = Vec::with_capacity(pairs.len());
    for (i, &(pred, truth)) in pairs.iter().enumerate() {
        if !(pred.is_finite() && truth.is_finite()) {
            return Err(MetricsError::Case {
                id: i.to_string(),
                reason: "non-finite value".into(),
            });
        }
        if truth <= 0.0 {
            return Err(MetricsError::Case {
                id: i.to_string(),
                reason: format!("truth {truth} must be positive for relative errors"),
            });
        }
        let e = (pred - truth).abs();
        abs.push(e);
        rel.push(e / truth);
    }
    let within = rel.iter().filter(|&&r| r <= 0.05).count() as f64;
    let mut report = MetricReport {
        n: pairs.len(),
        ..Default::default()
    };
    let v = &mut report.values;
    v.insert("mae".into(), mean(&abs));
    v.insert("mdae".into(), median(&abs));
    v.insert("mrae".into(), mean(&rel));
    v.insert("mdrae".into(), median(&rel));
    v.insert("p95_ae".into(), quantile(&abs, 0.95));
    v.insert("p95_rae".into(), quantile(&rel, 0.95));
    v.insert("acc_at_5pct".into(), within / pairs.len() as f64);
    Ok(report)
}

/// Fraction of `(predicted_ga, true_hc)` pairs whose HC lies in the chart's
/// 2.5–97.5 band at the predicted GA. Out-of-range GAs count as invalid.
pub fn validity_rate(pairs: &[(f64, f64)], chart: &GrowthChart) -> Result<MetricReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut valid = 0usize;
    let mut out_of_range = 0usize;
    for &(ga, hc) in pairs {
        match chart.validity_check(ga, hc) {
            Ok(true) => valid += 1,
            Ok(false) => {}
            Err(_) => out_of_range += 1,
        }
    }
    let mut report = MetricReport {
        n: pairs.len(),
        ..Default::default()
    };
    report
        .values
        .insert("validity_rate".into(), valid as f64 / pairs.len() as f64);
    if out_of_range > 0 {
        report.notes.push(format!(
            "{out_of_range} case(s) with GA outside the chart counted invalid"
        ));
    }
    Ok(report)
}

// Manifest

#[derive(Debug, Clone, PartialEq)]
pub enum CaseData {
    Classification(ClassificationCase),
    Segmentation { pred: Mask, truth: Mask },
    Biometry { pred: f64, truth: f64, true_hc: Option<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub id: String,
    pub data: CaseData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalManifest {
    pub task: TaskType,
    pub cases: Vec<EvalCase>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCase {
    id: String,
    pred: Value,
    truth: Value,
    #[serde(default)]
    true_hc: Option<f64>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum MaskRef {
    Inline(Mask),
    File { file: String },
}

fn resolve_mask(v: Value, base: &Path) -> Result<Mask, String> {
    let r: MaskRef = serde_json::from_value(v).map_err(|e| format!("bad mask: {e}"))?;
    match r {
        MaskRef::Inline(m) => Ok(m),
        MaskRef::File { file } => {
            let p = base.join(&file);
            if file.ends_with(".json") {
                let text = std::fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
                serde_json::from_str(&text).map_err(|e| format!("{}: {e}", p.display()))
            } else {
                load_mask_png(&p).map_err(|e| e.to_string())
            }
        }
    }
}

fn number(v: &Value, what: &str) -> Result<f64, String> {
    v.as_f64().ok_or_else(|| format!("{what} must be a number"))
}

/// Parses a JSON-lines manifest (`{id, pred, truth}` per line; blank lines
/// ignored). Mask file references resolve against `base_dir`.
pub fn parse_manifest(text: &str, task: TaskType, base_dir: &Path) -> Result<EvalManifest, MetricsError> {
    if task.is_composite() {
        return Err(MetricsError::UnsupportedTask(task));
    }
    let mut seen = BTreeSet::new();
    let mut cases = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| MetricsError::Manifest { line: line_no, reason };
        let raw: RawCase = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        if !seen.insert(raw.id.clone()) {
            return Err(err(format!("duplicate id {}", raw.id)));
        }
        let data = if task.is_classification() {
            let pred: ClassPrediction = serde_json::from_value(raw.pred)
                .map_err(|e| err(format!("pred: {e}")))?;
            let truth: PlaneLabel = serde_json::from_value(raw.truth)
                .map_err(|e| err(format!("truth: {e}")))?;
            let allowed: &[PlaneLabel] = if task == TaskType::BrainSubplaneClassification {
                &PlaneLabel::BRAIN_SUBPLANES
            } else {
                &PlaneLabel::STANDARD
            };
            for l in [pred.label(), truth] {
                if !allowed.contains(&l) {
                    return Err(err(format!("label {l} is not valid for {task}")));
                }
            }
            CaseData::Classification(ClassificationCase { pred, truth })
        } else if task.is_segmentation() {
            let pred = resolve_mask(raw.pred, base_dir).map_err(|e| err(format!("pred: {e}")))?;
            let truth = resolve_mask(raw.truth, base_dir).map_err(|e| err(format!("truth: {e}")))?;
            if !pred.same_dims(&truth) {
                return Err(err("prediction and truth dimensions differ".into()));
            }
            CaseData::Segmentation { pred, truth }
        } else {
            CaseData::Biometry {
                pred: number(&raw.pred, "pred").map_err(err)?,
                truth: number(&raw.truth, "truth").map_err(err)?,
                true_hc: raw.true_hc,
            }
        };
        cases.push(EvalCase { id: raw.id, data });
    }
    if cases.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(EvalManifest { task, cases })
}

/// Runs the metrics for the manifest's task. GA manifests whose cases all
/// carry `true_hc` also get the validity rate when an HC chart is given.
pub fn evaluate(manifest: &EvalManifest, hc_chart: Option<&GrowthChart>) -> Result<MetricReport, MetricsError> {
    let task = manifest.task;
    if task.is_classification() {
        let cases: Vec<ClassificationCase> = manifest
            .cases
            .iter()
            .filter_map(|c| match &c.data {
                CaseData::Classification(k) => Some(k.clone()),
                _ => None,
            })
            .collect();
        return classification_metrics(&cases);
    }
    if task.is_segmentation() {
        let pairs: Vec<(String, Mask, Mask)> = manifest
            .cases
            .iter()
            .filter_map(|c| match &c.data {
                CaseData::Segmentation { pred, truth } => Some((c.id.clone(), pred.clone(), truth.clone())),
                _ => None,
            })
            .collect();
        return segmentation_metrics(&pairs);
    }
    let mut pairs = Vec::new();
    let mut validity = Vec::new();
    for c in &manifest.cases {
        if let CaseData::Biometry { pred, truth, true_hc } = c.data {
            pairs.push((pred, truth));
            if let Some(hc) = true_hc {
                validity.push((pred, hc));
            }
        }
    }
    let mut report = biometry_metrics(&pairs)?;
    if task == TaskType::GAEstimation && !validity.is_empty() {
        if validity.len() < pairs.len() {
            report.notes.push("validity_rate omitted: not every case has true_hc".into());
        } else if let Some(chart) = hc_chart {
            report.merge(validity_rate(&validity, chart)?);
        } else {
            report.notes.push("validity_rate omitted: no HC growth chart".into());
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::growth::ChartRow;
    use approx::assert_relative_eq;
    use PlaneLabel::{Abdomen, Brain, Femur};

    fn lab(pred: PlaneLabel, truth: PlaneLabel) -> ClassificationCase {
        ClassificationCase {
            pred: ClassPrediction::Label(pred),
            truth,
        }
    }

    #[test]
    fn perfect_classification() {
        let cases = vec![lab(Brain, Brain), lab(Abdomen, Abdomen), lab(Femur, Femur)];
        let r = classification_metrics(&cases).unwrap();
        assert_eq!(r.get("accuracy"), Some(1.0));
        assert_eq!(r.get("kappa"), Some(1.0));
        assert_eq!(r.get("f1_macro"), Some(1.0));
        assert!(r.get("auroc_macro").is_none());
    }

    #[test]
    fn kappa_two_class_example() {
        let mut cases = Vec::new();
        cases.extend(std::iter::repeat(lab(Abdomen, Abdomen)).take(4));
        cases.push(lab(Brain, Abdomen));
        cases.push(lab(Abdomen, Brain));
        cases.extend(std::iter::repeat(lab(Brain, Brain)).take(4));
        let r = classification_metrics(&cases).unwrap();
        assert_eq!(r.get("accuracy"), Some(0.8));
        assert_eq!(r.get("kappa"), Some(0.6));
        assert_eq!(cohen_kappa(&[vec![4, 1], vec![1, 4]]), 0.6);
    }

    #[test]
    fn undefined_precision_counts_as_zero() {
        // Femur never predicted: its precision is 0/0 → 0.
        let cases = vec![lab(Brain, Brain), lab(Brain, Femur)];
        let r = classification_metrics(&cases).unwrap();
        assert_relative_eq!(r.get("precision_macro").unwrap(), (0.5 + 0.0) / 2.0);
        assert_relative_eq!(r.get("recall_macro").unwrap(), (1.0 + 0.0) / 2.0);
    }

    #[test]
    fn separating_probabilities_give_unit_auroc() {
        let d = |b: f64| {
            ClassPrediction::Distribution(ClassDistribution::from_pairs([(Brain, b), (Abdomen, 1.0 - b)]).unwrap())
        };
        let cases = vec![
            ClassificationCase { pred: d(0.9), truth: Brain },
            ClassificationCase { pred: d(0.7), truth: Brain },
            ClassificationCase { pred: d(0.2), truth: Abdomen },
            ClassificationCase { pred: d(0.4), truth: Abdomen },
        ];
        assert_eq!(classification_metrics(&cases).unwrap().get("auroc_macro"), Some(1.0));
        assert_eq!(auroc_binary(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(auroc_binary(&[0.5, 0.7], &[true, true]), None);
    }

    #[test]
    fn segmentation_examples() {
        let m = Mask::from_fn(8, 8, |x, y| x > 2 && y > 1 && x < 6).unwrap();
        let s = segmentation_scores(&m, &m).unwrap();
        assert_eq!((s.dsc, s.iou, s.hd95, s.assd), (1.0, 1.0, Some(0.0), Some(0.0)));

        let other = Mask::from_fn(8, 8, |x, _| x == 0).unwrap();
        let s = segmentation_scores(&m, &other).unwrap();
        assert_eq!((s.dsc, s.ppv, s.sensitivity), (0.0, 0.0, 0.0));

        let a = Mask::from_fn(6, 6, |x, y| x == 0 && y == 0).unwrap();
        let b = Mask::from_fn(6, 6, |x, y| x == 3 && y == 4).unwrap();
        let s = segmentation_scores(&a, &b).unwrap();
        assert_eq!(s.hd95, Some(5.0));
        assert_eq!(s.assd, Some(5.0));
    }

    #[test]
    fn empty_mask_conventions() {
        let e = Mask::empty(4, 4).unwrap();
        let s = segmentation_scores(&e, &e).unwrap();
        assert_eq!((s.dsc, s.iou, s.hd95), (1.0, 1.0, Some(0.0)));
        let f = Mask::from_fn(4, 4, |x, _| x == 1).unwrap();
        let s = segmentation_scores(&e, &f).unwrap();
        assert_eq!((s.dsc, s.iou, s.hd95), (0.0, 0.0, None));
        let r = segmentation_metrics(&[("a".into(), e.clone(), f), ("b".into(), e.clone(), e)]).unwrap();
        assert_eq!(r.get("hd95"), Some(0.0));
        assert_eq!(r.notes.len(), 1);
        assert!(segmentation_scores(&Mask::empty(3, 3).unwrap(), &Mask::empty(4, 3).unwrap()).is_err());
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let (w, h) = (9, 7);
        let feat: Vec<bool> = (0..w * h).map(|i| i % 11 == 3 || i == 40).collect();
        let d = squared_distance_transform(w, h, &feat);
        for y in 0..h {
            for x in 0..w {
                let best = (0..w * h)
                    .filter(|&j| feat[j])
                    .map(|j| {
                        let (fx, fy) = ((j % w) as f64, (j / w) as f64);
                        (x as f64 - fx).powi(2) + (y as f64 - fy).powi(2)
                    })
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(d[y * w + x], best, "({x},{y})");
            }
        }
        assert!(squared_distance_transform(3, 3, &[false; 9]).iter().all(|v| v.is_infinite()));
    }

    #[test]
    fn biometry_examples() {
        let r = biometry_metrics(&[(10.0, 10.0), (20.0, 20.0)]).unwrap();
        assert_eq!(r.get("mae"), Some(0.0));
        assert_eq!(r.get("acc_at_5pct"), Some(1.0));

        let r = biometry_metrics(&[(105.0, 100.0)]).unwrap();
        assert_eq!(r.get("mae"), Some(5.0));
        assert_eq!(r.get("mrae"), Some(0.05));
        assert_eq!(r.get("acc_at_5pct"), Some(1.0));

        let r = biometry_metrics(&[(10.0, 10.0), (12.0, 10.0), (10.0, 12.0)]).unwrap();
        assert_eq!(r.get("mae"), Some(4.0 / 3.0));
        assert_eq!(r.get("mdae"), Some(2.0));

        let r = biometry_metrics(&[(1.0, 2.0), (4.0, 2.0)]).unwrap();
        assert_eq!(r.get("mdae"), Some(1.5));
        assert!(biometry_metrics(&[(1.0, 0.0)]).is_err());
    }

    fn chart() -> GrowthChart {
        let row = |ga: f64, base: f64| ChartRow {
            ga_weeks: ga,
            values: [0.0, 3.0, 7.0, 11.0, 15.0, 19.0, 23.0, 27.0, 30.0].map(|d| base + d),
        };
        GrowthChart::new(crate::domain::Measure::HC, vec![row(20.0, 160.0), row(21.0, 170.0)]).unwrap()
    }

    #[test]
    fn validity_rate_examples() {
        let c = chart();
        let r = validity_rate(&[(20.0, 175.0), (21.0, 185.0)], &c).unwrap();
        assert_eq!(r.get("validity_rate"), Some(1.0));
        let r = validity_rate(&[(20.0, 100.0), (21.0, 150.0)], &c).unwrap();
        assert_eq!(r.get("validity_rate"), Some(0.0));
        let r = validity_rate(&[(20.0, 175.0), (20.5, 180.0), (21.0, 200.0), (20.0, 191.0)], &c).unwrap();
        assert_eq!(r.get("validity_rate"), Some(0.75));
        let r = validity_rate(&[(25.0, 175.0)], &c).unwrap();
        assert_eq!(r.get("validity_rate"), Some(0.0));
        assert_eq!(r.notes.len(), 1);
    }

    #[test]
    fn manifest_parsing() {
        let dir = Path::new(".");
        let text = "{\"id\":\"a\",\"pred\":\"brain\",\"truth\":\"brain\"}\n\n{\"id\":\"b\",\"pred\":{\"brain\":0.2,\"abdomen\":0.8},\"truth\":\"abdomen\"}\n";
        let m = parse_manifest(text, TaskType::PlaneClassification, dir).unwrap();
        assert_eq!(m.cases.len(), 2);
        assert_eq!(evaluate(&m, None).unwrap().get("accuracy"), Some(1.0));

        let bad = "{\"id\":\"a\",\"pred\":\"brain\",\"truth\":\"brain\"}\n{\"id\":\"b\",\"pred\":";
        let err = parse_manifest(bad, TaskType::PlaneClassification, dir).unwrap_err();
        assert!(matches!(err, MetricsError::Manifest { line: 2, .. }));
        assert!(err.to_string().contains("line 2"));

        let dup = "{\"id\":\"a\",\"pred\":1,\"truth\":1}\n{\"id\":\"a\",\"pred\":1,\"truth\":1}";
        assert!(matches!(
            parse_manifest(dup, TaskType::HCMeasurement, dir),
            Err(MetricsError::Manifest { line: 2, .. })
        ));

        let seg = r#"{"id":"s","pred":{"width":2,"height":1,"runs":[[0,1]]},"truth":{"width":2,"height":1,"runs":[[0,1]]}}"#;
        let m = parse_manifest(seg, TaskType::HeadSegmentation, dir).unwrap();
        assert_eq!(evaluate(&m, None).unwrap().get("dsc"), Some(1.0));

        let wrong = "{\"id\":\"a\",\"pred\":\"trans_thalamic\",\"truth\":\"brain\"}";
        assert!(parse_manifest(wrong, TaskType::PlaneClassification, dir).is_err());
    }

    #[test]
    fn ga_manifest_includes_validity() {
        let text = "{\"id\":\"a\",\"pred\":20.0,\"truth\":20.5,\"true_hc\":175.0}\n{\"id\":\"b\",\"pred\":21.0,\"truth\":21.0,\"true_hc\":150.0}";
        let m = parse_manifest(text, TaskType::GAEstimation, Path::new(".")).unwrap();
        let r = evaluate(&m, Some(&chart())).unwrap();
        assert_eq!(r.get("validity_rate"), Some(0.5));
        assert_eq!(r.get("mae"), Some(0.25));
    }

    #[test]
    fn table_is_aligned() {
        let r = biometry_metrics(&[(105.0, 100.0)]).unwrap();
        let t = r.to_table();
        let cols: BTreeSet<usize> = t.lines().map(|l| l.rfind("  ").unwrap() + 2).collect();
        assert_eq!(cols.len(), 1, "{t}");
        assert!(t.contains("acc_at_5pct  1.000000"));
    }
}
