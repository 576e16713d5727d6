//! The structured outputs gathered for one image before report synthesis.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{
    BiometryValue, DomainError, ExpertResult, FusedResult, Measure, PlaneLabel, TaskType,
};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FindingsBundle {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plane: Option<PlaneLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subplane: Option<PlaneLabel>,
    pub fused: Vec<FusedResult>,
    pub per_tool: Vec<ExpertResult>,
    #[serde(default)]
    pub annotations: BTreeMap<String, Value>,
}

impl FindingsBundle {
    pub fn new(plane: Option<PlaneLabel>) -> Self {
        Self {
            plane,
            ..Self::default()
        }
    }

    /// Every fused contributor must have a matching per-tool entry for the
    /// same task.
    pub fn validate(&self) -> Result<(), DomainError> {
        let have: BTreeSet<(&str, TaskType)> = self
            .per_tool
            .iter()
            .map(|r| (r.tool_id.as_str(), r.task))
            .collect();
        for f in &self.fused {
            for c in &f.contributors {
                if !have.contains(&(c.as_str(), f.task)) {
                    return Err(DomainError::Invalid(format!(
                        "contributor {c} of {} has no per-tool result",
                        f.task
                    )));
                }
            }
        }
        if let (Some(sub), Some(plane)) = (self.subplane, self.plane) {
            sub.check_subplane_of(plane)?;
        }
        Ok(())
    }

    pub fn fused_for(&self, task: TaskType) -> Option<&FusedResult> {
        self.fused.iter().find(|f| f.task == task)
    }

    /// First fused biometry value for `measure`.
    pub fn biometry(&self, measure: Measure) -> Option<&BiometryValue> {
        self.fused
            .iter()
            .filter_map(|f| f.payload.as_biometry())
            .find(|b| b.measure == measure)
    }

    /// Per-tool results behind a fused result.
    pub fn contributions<'a>(&'a self, fused: &'a FusedResult) -> impl Iterator<Item = &'a ExpertResult> + 'a {
        self.per_tool
            .iter()
            .filter(move |r| r.task == fused.task && fused.contributors.contains(&r.tool_id))
    }

    pub fn annotate(&mut self, key: impl Into<String>, value: Value) {
        self.annotations.insert(key.into(), value);
    }

    /// Findings plane as displayed: the sub-plane when known.
    pub fn display_plane(&self) -> Option<PlaneLabel> {
        self.subplane.or(self.plane)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Payload, Unit};

    #[test]
    fn contributors_must_be_audited() {
        let b = BiometryValue::new(Measure::HC, 175.0, Unit::Mm, "m", 1.0).unwrap();
        let r = ExpertResult::ok("t1", TaskType::HCMeasurement, Payload::Biometry(b.clone()), 1.0).unwrap();
        let f = FusedResult::new(TaskType::HCMeasurement, Payload::Biometry(b), vec!["t1".into()], "scalar_median")
            .unwrap();
        let mut bundle = FindingsBundle::new(Some(PlaneLabel::Brain));
        bundle.fused.push(f);
        assert!(bundle.validate().is_err());
        bundle.per_tool.push(r);
        assert!(bundle.validate().is_ok());
        assert_eq!(bundle.biometry(Measure::HC).unwrap().value, 175.0);
    }
}
