//! Deterministic fusion of per-tool outputs into one result per expert.
//!
//! Every rule drops error-status results first and sorts the survivors by
//! `(tool_id, canonical payload)` before doing arithmetic, so the output does
//! not depend on the order results arrived in.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    BiometryValue, ClassDistribution, DomainError, ExpertResult, FusedResult, Mask, Payload,
    PlaneLabel, TaskType,
};
use crate::json::canonical_json;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionRuleId {
    WeightedVote,
    PixelMajority,
    ScalarMedian,
    BestConfidence,
}

impl FusionRuleId {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionRuleId::WeightedVote => "weighted_vote",
            FusionRuleId::PixelMajority => "pixel_majority",
            FusionRuleId::ScalarMedian => "scalar_median",
            FusionRuleId::BestConfidence => "best_confidence",
        }
    }

    /// Whether this rule can fuse tool outputs for `task`.
    ///
    /// Measurement tasks accept `pixel_majority`: their tools' masks are
    /// fused first and the measurement is derived from the fused mask.
    pub fn applies_to(self, task: TaskType) -> bool {
        match self {
            FusionRuleId::BestConfidence => task != TaskType::ImageCaption,
            FusionRuleId::WeightedVote => task.emits_distribution(),
            FusionRuleId::PixelMajority => {
                task.is_segmentation()
                    || matches!(task, TaskType::HCMeasurement | TaskType::ACMeasurement | TaskType::AoP)
            }
            FusionRuleId::ScalarMedian => task.measure().is_some(),
        }
    }
}

impl fmt::Display for FusionRuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error("no ok-status results to fuse")]
    NoResults,
    #[error("mask dimensions differ: {0}")]
    DimensionMismatch(String),
    #[error("mixed measures or units: {0}")]
    MixedUnits(String),
    #[error("payload kind {found} cannot be fused by {rule}")]
    WrongPayload { rule: &'static str, found: &'static str },
    #[error(transparent)]
    Domain(#[from] DomainError),
}

pub type Weights = BTreeMap<String, f64>;

fn weight_of(weights: &Weights, tool_id: &str) -> f64 {
    weights.get(tool_id).copied().unwrap_or(1.0)
}

/// Ok-status results in canonical order.
fn survivors(results: &[ExpertResult]) -> Result<Vec<&ExpertResult>, FusionError> {
    let mut ok: Vec<(&ExpertResult, String)> = results
        .iter()
        .filter(|r| r.is_ok() && r.payload.is_some())
        .map(|r| (r, canonical_json(&r.payload).unwrap_or_default()))
        .collect();
    if ok.is_empty() {
        return Err(FusionError::NoResults);
    }
    ok.sort_by(|a, b| a.0.tool_id.cmp(&b.0.tool_id).then_with(|| a.1.cmp(&b.1)));
    Ok(ok.into_iter().map(|(r, _)| r).collect())
}

fn contributors(results: &[&ExpertResult]) -> Vec<String> {
    let mut ids: Vec<String> = results.iter().map(|r| r.tool_id.clone()).collect();
    ids.dedup();
    ids
}

/// Dispatches to the rule's fusion function.
pub fn fuse(
    rule: FusionRuleId,
    task: TaskType,
    results: &[ExpertResult],
    weights: &Weights,
) -> Result<FusedResult, FusionError> {
    match rule {
        FusionRuleId::WeightedVote => fuse_classification(task, results, weights),
        FusionRuleId::PixelMajority => fuse_masks(task, results, weights),
        FusionRuleId::ScalarMedian => fuse_scalars(task, results),
        FusionRuleId::BestConfidence => best_confidence(task, results),
    }
}

/// Confidence- and weight-scaled soft vote over class distributions.
pub fn fuse_classification(
    task: TaskType,
    results: &[ExpertResult],
    weights: &Weights,
) -> Result<FusedResult, FusionError> {
    let ok = survivors(results)?;
    let mut dists = Vec::with_capacity(ok.len());
    for r in &ok {
        match r.payload.as_ref().and_then(Payload::as_distribution) {
            Some(d) => dists.push((*r, d)),
            None => {
                return Err(FusionError::WrongPayload {
                    rule: "weighted_vote",
                    found: r.payload.as_ref().map_or("none", Payload::kind),
                })
            }
        }
    }

    let scaled: f64 = dists
        .iter()
        .map(|(r, _)| weight_of(weights, &r.tool_id) * r.confidence)
        .sum();
    let mut mass: BTreeMap<PlaneLabel, f64> = BTreeMap::new();
    for (r, d) in &dists {
        let w = weight_of(weights, &r.tool_id);
        // All-zero confidences fall back to plain weights.
        let factor = if scaled > 0.0 { w * r.confidence } else { w };
        for (&label, &p) in d.probs() {
            *mass.entry(label).or_insert(0.0) += factor * p;
        }
    }
    let fused = ClassDistribution::normalized(mass)?;

    // Votes: each tool's own argmax, carrying that tool's confidence.
    let mut votes: BTreeMap<PlaneLabel, Vec<f64>> = BTreeMap::new();
    for (r, d) in &dists {
        votes.entry(d.argmax().0).or_default().push(r.confidence);
    }
    let mean_conf = |label: &PlaneLabel| {
        votes
            .get(label)
            .map_or(0.0, |v| v.iter().sum::<f64>() / v.len() as f64)
    };
    let top = fused.probs().values().copied().fold(f64::NEG_INFINITY, f64::max);
    let label = fused
        .probs()
        .iter()
        .filter(|(_, &p)| p == top)
        .map(|(l, _)| *l)
        .max_by(|a, b| {
            mean_conf(a)
                .total_cmp(&mean_conf(b))
                .then_with(|| b.as_str().cmp(a.as_str()))
        })
        .expect("non-empty distribution");

    let contributors = contributors(&ok);
    Ok(FusedResult::new(task, Payload::Classification(fused), contributors, "weighted_vote")?
        .with_label(label))
}

/// Weighted strict-majority vote per pixel.
///
/// A pixel is foreground iff the tools marking it hold more than half of the
/// total weight. With two equal-weight tools this is the intersection.
pub fn majority_mask<'a>(
    masks: impl IntoIterator<Item = (&'a Mask, f64)>,
) -> Result<Mask, FusionError> {
    let masks: Vec<(&Mask, f64)> = masks.into_iter().collect();
    let Some((first, _)) = masks.first() else {
        return Err(FusionError::NoResults);
    };
    let (w, h) = (first.width(), first.height());
    if let Some((bad, _)) = masks.iter().find(|(m, _)| !m.same_dims(first)) {
        return Err(FusionError::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            bad.width(),
            bad.height(),
            w,
            h
        )));
    }
    let total: f64 = masks.iter().map(|(_, wt)| wt).sum();
    let mut votes = vec![0.0f64; first.pixel_count()];
    for (m, wt) in &masks {
        for &(s, l) in m.runs() {
            for v in &mut votes[s as usize..(s + l) as usize] {
                *v += wt;
            }
        }
    }
    let raster: Vec<bool> = votes.iter().map(|&v| 2.0 * v > total).collect();
    Ok(Mask::from_raster(w, h, &raster)?)
}

pub fn fuse_masks(
    task: TaskType,
    results: &[ExpertResult],
    weights: &Weights,
) -> Result<FusedResult, FusionError> {
    let ok = survivors(results)?;
    let mut masks = Vec::with_capacity(ok.len());
    for r in &ok {
        match r.payload.as_ref().and_then(Payload::as_mask) {
            Some(m) => masks.push((m, weight_of(weights, &r.tool_id))),
            None => {
                return Err(FusionError::WrongPayload {
                    rule: "pixel_majority",
                    found: r.payload.as_ref().map_or("none", Payload::kind),
                })
            }
        }
    }
    let fused = majority_mask(masks)?;
    Ok(FusedResult::new(
        task,
        Payload::Mask(fused),
        contributors(&ok),
        "pixel_majority",
    )?)
}

/// Pixel-majority fusion of named mask sets, structure by structure.
///
/// Every ok result must carry the same set of structure names.
pub fn fuse_mask_sets(
    results: &[ExpertResult],
    weights: &Weights,
) -> Result<(BTreeMap<String, Mask>, Vec<String>), FusionError> {
    let ok = survivors(results)?;
    let mut sets = Vec::with_capacity(ok.len());
    for r in &ok {
        match r.payload.as_ref() {
            Some(Payload::MaskSet(s)) => sets.push((s, weight_of(weights, &r.tool_id))),
            other => {
                return Err(FusionError::WrongPayload {
                    rule: "pixel_majority",
                    found: other.map_or("none", Payload::kind),
                })
            }
        }
    }
    let names: Vec<&String> = sets[0].0.keys().collect();
    if sets.iter().any(|(s, _)| s.keys().collect::<Vec<_>>() != names) {
        return Err(FusionError::DimensionMismatch("mask sets name different structures".into()));
    }
    let mut fused = BTreeMap::new();
    for name in names {
        let m = majority_mask(sets.iter().map(|(s, w)| (&s[name], *w)))?;
        fused.insert(name.clone(), m);
    }
    Ok((fused, contributors(&ok)))
}

/// Lower median of a non-empty slice (the value itself, never an average).
pub fn lower_median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(v[(v.len() - 1) / 2])
}

/// Median of scalar biometry values; even counts take the lower middle.
pub fn fuse_scalars(task: TaskType, results: &[ExpertResult]) -> Result<FusedResult, FusionError> {
    let ok = survivors(results)?;
    let mut values: Vec<&BiometryValue> = Vec::with_capacity(ok.len());
    for r in &ok {
        match r.payload.as_ref().and_then(Payload::as_biometry) {
            Some(b) => values.push(b),
            None => {
                return Err(FusionError::WrongPayload {
                    rule: "scalar_median",
                    found: r.payload.as_ref().map_or("none", Payload::kind),
                })
            }
        }
    }
    let first = values[0];
    if let Some(b) = values
        .iter()
        .find(|b| b.measure != first.measure || b.unit != first.unit)
    {
        return Err(FusionError::MixedUnits(format!(
            "{} {} vs {} {}",
            first.measure, first.unit, b.measure, b.unit
        )));
    }
    let raw: Vec<f64> = values.iter().map(|b| b.value).collect();
    let median = lower_median(&raw).expect("non-empty");
    let confidence = values.iter().map(|b| b.confidence).sum::<f64>() / values.len() as f64;
    let fused = BiometryValue::new(
        first.measure,
        median,
        first.unit,
        "scalar_median",
        confidence.clamp(0.0, 1.0),
    )?;
    Ok(FusedResult::new(task, Payload::Biometry(fused), contributors(&ok), "scalar_median")?)
}

/// Picks the single most confident result; ties go to the smaller tool id.
pub fn best_confidence(task: TaskType, results: &[ExpertResult]) -> Result<FusedResult, FusionError> {
    let ok = survivors(results)?;
    let best = ok
        .iter()
        .copied()
        .reduce(|a, b| if b.confidence > a.confidence { b } else { a })
        .expect("non-empty");
    let payload = best.payload.clone().expect("ok result has payload");
    let label = payload.as_distribution().map(|d| d.argmax().0);
    let fused = FusedResult::new(task, payload, vec![best.tool_id.clone()], "best_confidence")?;
    Ok(match label {
        Some(l) => fused.with_label(l),
        None => fused,
    })
}
