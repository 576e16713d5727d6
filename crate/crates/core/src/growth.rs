//! Normative growth-percentile tables, percentile lookup, the validity band
//! check and the reflection safeguard for implausible measurements.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::domain::{ExpertResult, FusedResult, Measure, Payload, TaskType, Unit};
use crate::findings::FindingsBundle;
use crate::fusion;

/// Percentile ranks of the tabulated curves, in column order.
pub const PERCENTILES: [f64; 9] = [2.5, 5.0, 10.0, 25.0, 50.0, 75.0, 90.0, 95.0, 97.5];
pub const HEADER: [&str; 10] = [
    "ga_weeks", "p2.5", "p5", "p10", "p25", "p50", "p75", "p90", "p95", "p97.5",
];

const P_FLOOR: f64 = 0.1;
const P_CAP: f64 = 99.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChartError {
    #[error("chart ingestion failed at row {row}: {reason}")]
    Row { row: u64, reason: String },
    #[error("chart ingestion failed: {0}")]
    Format(String),
    #[error("gestational age {ga} weeks outside chart range [{min}, {max}]")]
    OutOfRange { ga: f64, min: f64, max: f64 },
    #[error("measurement value must be positive and finite, got {0}")]
    InvalidValue(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChartRow {
    pub ga_weeks: f64,
    /// Curve values in [`PERCENTILES`] order.
    pub values: [f64; 9],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthChart {
    pub measure: Measure,
    rows: Vec<ChartRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PercentileResult {
    pub percentile: f64,
    pub in_band_2_5_97_5: bool,
    /// The value lies outside the tabulated curves.
    pub clamped: bool,
}

pub type ChartSet = BTreeMap<Measure, GrowthChart>;

impl GrowthChart {
    pub fn new(measure: Measure, rows: Vec<ChartRow>) -> Result<Self, ChartError> {
        if !matches!(measure, Measure::HC | Measure::AC) {
            return Err(ChartError::Format(format!("no growth chart for measure {measure}")));
        }
        if rows.is_empty() {
            return Err(ChartError::Format("chart has no rows".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            let row = i as u64 + 1;
            if !r.ga_weeks.is_finite() || r.values.iter().any(|v| !v.is_finite()) {
                return Err(ChartError::Row {
                    row,
                    reason: "non-finite value".into(),
                });
            }
            if let Some(k) = (1..9).find(|&k| r.values[k] <= r.values[k - 1]) {
                return Err(ChartError::Row {
                    row,
                    reason: format!(
                        "{} ({}) is not above {} ({})",
                        HEADER[k + 1],
                        r.values[k],
                        HEADER[k],
                        r.values[k - 1]
                    ),
                });
            }
            if r.values[0] <= 0.0 {
                return Err(ChartError::Row {
                    row,
                    reason: "curve values must be positive".into(),
                });
            }
            if i > 0 && r.ga_weeks <= rows[i - 1].ga_weeks {
                return Err(ChartError::Row {
                    row,
                    reason: format!(
                        "ga_weeks {} does not increase past {}",
                        r.ga_weeks,
                        rows[i - 1].ga_weeks
                    ),
                });
            }
        }
        Ok(Self { measure, rows })
    }

    /// Parses the CSV chart format. Row numbers in errors count data rows
    /// from 1 (the header is row 0).
    pub fn from_csv<R: Read>(measure: Measure, reader: R) -> Result<Self, ChartError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| ChartError::Format(e.to_string()))?
            .clone();
        let mut cols = [0usize; 10];
        for (k, name) in HEADER.iter().enumerate() {
            cols[k] = headers
                .iter()
                .position(|h| h == *name)
                .ok_or_else(|| ChartError::Format(format!("missing column {name}")))?;
        }
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let row = i as u64 + 1;
            let rec = rec.map_err(|e| ChartError::Row {
                row,
                reason: e.to_string(),
            })?;
            let mut vals = [0f64; 10];
            for (k, &c) in cols.iter().enumerate() {
                let field = rec.get(c).ok_or_else(|| ChartError::Row {
                    row,
                    reason: format!("missing field {}", HEADER[k]),
                })?;
                vals[k] = field.parse().map_err(|_| ChartError::Row {
                    row,
                    reason: format!("{} is not a number: {field:?}", HEADER[k]),
                })?;
            }
            let mut values = [0f64; 9];
            values.copy_from_slice(&vals[1..]);
            rows.push(ChartRow {
                ga_weeks: vals[0],
                values,
            });
        }
        Self::new(measure, rows)
    }

    pub fn load(measure: Measure, path: impl AsRef<Path>) -> Result<Self, ChartError> {
        let path = path.as_ref();
        let f = std::fs::File::open(path)
            .map_err(|e| ChartError::Format(format!("{}: {e}", path.display())))?;
        Self::from_csv(measure, f)
    }

    pub fn rows(&self) -> &[ChartRow] {
        &self.rows
    }

    pub fn ga_range(&self) -> (f64, f64) {
        (self.rows[0].ga_weeks, self.rows[self.rows.len() - 1].ga_weeks)
    }

    /// All nine curves at `ga`, linearly interpolated between rows.
    pub fn curves_at(&self, ga: f64) -> Result<[f64; 9], ChartError> {
        let (min, max) = self.ga_range();
        if !(ga >= min && ga <= max) {
            return Err(ChartError::OutOfRange { ga, min, max });
        }
        let hi = self.rows.partition_point(|r| r.ga_weeks < ga);
        let upper = &self.rows[hi];
        if upper.ga_weeks == ga || hi == 0 {
            return Ok(upper.values);
        }
        let lower = &self.rows[hi - 1];
        let t = (ga - lower.ga_weeks) / (upper.ga_weeks - lower.ga_weeks);
        let mut out = [0f64; 9];
        for k in 0..9 {
            out[k] = lower.values[k] + t * (upper.values[k] - lower.values[k]);
        }
        Ok(out)
    }

    pub fn median_at(&self, ga: f64) -> Result<f64, ChartError> {
        Ok(self.curves_at(ga)?[4])
    }

    pub fn percentile_of(&self, ga: f64, value: f64) -> Result<PercentileResult, ChartError> {
        if !(value.is_finite() && value > 0.0) {
            return Err(ChartError::InvalidValue(value));
        }
        let c = self.curves_at(ga)?;
        let (low, high) = (c[0], c[8]);
        if value < low {
            return Ok(PercentileResult {
                percentile: (PERCENTILES[0] * value / low).max(P_FLOOR),
                in_band_2_5_97_5: false,
                clamped: true,
            });
        }
        if value > high {
            // Mirror of the lower tail: the relative excess over the top curve
            // scales the remaining 2.5 points.
            return Ok(PercentileResult {
                percentile: (PERCENTILES[8] + 2.5 * (value / high - 1.0)).min(P_CAP),
                in_band_2_5_97_5: false,
                clamped: true,
            });
        }
        let k = (0..8).find(|&k| value <= c[k + 1]).unwrap_or(7);
        let t = (value - c[k]) / (c[k + 1] - c[k]);
        Ok(PercentileResult {
            percentile: PERCENTILES[k] + t * (PERCENTILES[k + 1] - PERCENTILES[k]),
            in_band_2_5_97_5: true,
            clamped: false,
        })
    }

    /// Whether `value` lies in the closed 2.5–97.5 band at `ga`.
    pub fn validity_check(&self, predicted_ga: f64, value: f64) -> Result<bool, ChartError> {
        Ok(self.percentile_of(predicted_ga, value)?.in_band_2_5_97_5)
    }

    /// GA at which the 50th-percentile curve reaches `value`, if the curve
    /// crosses it within the tabulated range.
    pub fn ga_for_median(&self, value: f64) -> Option<f64> {
        if let [only] = self.rows.as_slice() {
            return (only.values[4] == value).then_some(only.ga_weeks);
        }
        self.rows.windows(2).find_map(|w| {
            let (a, b) = (w[0].values[4], w[1].values[4]);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            if value < lo || value > hi {
                return None;
            }
            let t = if a == b { 0.0 } else { (value - a) / (b - a) };
            Some(w[0].ga_weeks + t * (w[1].ga_weeks - w[0].ga_weeks))
        })
    }
}

pub fn load_chart(measure: Measure, path: impl AsRef<Path>) -> Result<GrowthChart, ChartError> {
    GrowthChart::load(measure, path)
}

pub fn percentile_of(chart: &GrowthChart, ga: f64, value: f64) -> Result<PercentileResult, ChartError> {
    chart.percentile_of(ga, value)
}

pub fn validity_check(chart: &GrowthChart, predicted_ga: f64, true_hc: f64) -> Result<bool, ChartError> {
    chart.validity_check(predicted_ga, true_hc)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReflectionBand {
    pub lower: f64,
    pub upper: f64,
}

impl Default for ReflectionBand {
    fn default() -> Self {
        Self {
            lower: 0.5,
            upper: 99.5,
        }
    }
}

impl ReflectionBand {
    pub fn contains(&self, p: f64) -> bool {
        p >= self.lower && p <= self.upper
    }
}

/// Reflection over HC/AC findings whose percentile leaves `band`.
///
/// Annotations are written under the measure's key (`"hc"`, `"ac"`). A
/// measure that already carries an annotation is left alone, so a second
/// pass changes nothing.
pub fn reflection_safeguard(
    findings: &FindingsBundle,
    charts: &ChartSet,
    band: ReflectionBand,
) -> FindingsBundle {
    let mut out = findings.clone();
    let ga = findings.biometry(Measure::GA).map(|b| b.value);
    for idx in 0..findings.fused.len() {
        let fused = &findings.fused[idx];
        let Some(b) = fused.payload.as_biometry() else {
            continue;
        };
        if !matches!(b.measure, Measure::HC | Measure::AC) {
            continue;
        }
        let key = b.measure.as_str();
        if findings.annotations.contains_key(key) {
            continue;
        }
        let Some(chart) = charts.get(&b.measure) else {
            out.annotate(key, json!({"unvalidated": true, "reason": "no growth chart"}));
            continue;
        };
        if b.unit != Unit::Mm {
            out.annotate(key, json!({"unvalidated": true, "reason": "uncalibrated"}));
            continue;
        }
        let Some(ga) = ga else {
            out.annotate(key, json!({"unvalidated": true, "reason": "no gestational age"}));
            continue;
        };
        let p = match chart.percentile_of(ga, b.value) {
            Ok(p) => p.percentile,
            Err(e) => {
                out.annotate(key, json!({"unvalidated": true, "reason": e.to_string()}));
                continue;
            }
        };
        if band.contains(p) {
            continue;
        }
        let candidates: Vec<(&ExpertResult, f64)> = findings
            .contributions(fused)
            .filter_map(|r| {
                let v = r.payload.as_ref()?.as_biometry()?;
                (v.unit == b.unit && v.measure == b.measure)
                    .then(|| chart.percentile_of(ga, v.value).ok())
                    .flatten()
                    .map(|pr| (r, pr.percentile))
            })
            .collect();
        match refuse_without_extremes(fused, &candidates) {
            Some(replacement) => {
                let rv = replacement.payload.as_biometry().expect("biometry").value;
                let rp = chart.percentile_of(ga, rv).map(|r| r.percentile).unwrap_or(p);
                if band.contains(rp) {
                    out.annotate(
                        key,
                        json!({
                            "replaced_by_reflection": true,
                            "original_value": b.value,
                            "original_percentile": p,
                            "replacement_value": rv,
                            "replacement_percentile": rp,
                            "excluded": excluded(fused, &replacement),
                        }),
                    );
                    out.fused[idx] = replacement;
                    continue;
                }
                out.annotate(
                    key,
                    json!({"out_of_band": true, "value": b.value, "percentile": p, "refused_value": rv}),
                );
            }
            None => {
                out.annotate(key, json!({"out_of_band": true, "value": b.value, "percentile": p}));
            }
        }
    }
    out
}

fn excluded(original: &FusedResult, replacement: &FusedResult) -> Vec<String> {
    original
        .contributors
        .iter()
        .filter(|c| !replacement.contributors.contains(c))
        .cloned()
        .collect()
}

/// Re-fuses after dropping every contributor tied for the most extreme
/// percentile (distance from 50).
fn refuse_without_extremes(fused: &FusedResult, candidates: &[(&ExpertResult, f64)]) -> Option<FusedResult> {
    let worst = candidates
        .iter()
        .map(|(_, p)| (p - 50.0).abs())
        .fold(f64::NEG_INFINITY, f64::max);
    let kept: Vec<ExpertResult> = candidates
        .iter()
        .filter(|(_, p)| (p - 50.0).abs() < worst - 1e-12)
        .map(|(r, _)| (*r).clone())
        .collect();
    if kept.is_empty() {
        return None;
    }
    let task: TaskType = fused.task;
    let refused = if fused.fusion_rule == "best_confidence" {
        fusion::best_confidence(task, &kept)
    } else {
        fusion::fuse_scalars(task, &kept)
    };
    let mut refused = refused.ok()?;
    refused.fusion_rule = fused.fusion_rule.clone();
    matches!(refused.payload, Payload::Biometry(_)).then_some(refused)
}
