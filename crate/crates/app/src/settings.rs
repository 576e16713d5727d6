//! Config loading with environment overrides.

use std::path::{Path, PathBuf};

use fetalflow_core::config::{ConfigError, EngineConfig};

pub const ENV_RUNS_DIR: &str = "FETALFLOW_RUNS_DIR";
pub const ENV_PORT: &str = "FETALFLOW_PORT";
pub const ENV_LEXICON: &str = "FETALFLOW_LEXICON";
pub const ENV_REPORT_TEMPLATE: &str = "FETALFLOW_REPORT_TEMPLATE";
pub const ENV_CHART_HC: &str = "FETALFLOW_CHART_HC";
pub const ENV_CHART_AC: &str = "FETALFLOW_CHART_AC";
pub const ENV_CLOCK: &str = "FETALFLOW_CLOCK";

pub const DEFAULT_PORT: u16 = 8080;

/// Overrides config fields from `lookup`. Override paths are taken as given
/// (relative to the working directory), not relative to the config file.
pub fn apply_overrides(cfg: &mut EngineConfig, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
    let path = |k: &str| lookup(k).filter(|v| !v.is_empty()).map(PathBuf::from);
    if let Some(p) = path(ENV_RUNS_DIR) {
        cfg.runs_dir = Some(p);
    }
    if let Some(p) = path(ENV_LEXICON) {
        cfg.lexicon = Some(p);
    }
    if let Some(p) = path(ENV_REPORT_TEMPLATE) {
        cfg.report_template = Some(p);
    }
    if let Some(p) = path(ENV_CHART_HC) {
        cfg.charts.hc = p;
    }
    if let Some(p) = path(ENV_CHART_AC) {
        cfg.charts.ac = p;
    }
    if let Some(c) = lookup(ENV_CLOCK).filter(|v| !v.is_empty()) {
        cfg.clock = Some(c);
    }
    if let Some(p) = lookup(ENV_PORT).filter(|v| !v.is_empty()) {
        let port = p
            .parse()
            .map_err(|_| ConfigError::Invalid(format!("{ENV_PORT}={p:?} is not a port number")))?;
        cfg.port = Some(port);
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<EngineConfig, ConfigError> {
    let mut cfg = EngineConfig::load(path)?;
    apply_overrides(&mut cfg, |k| std::env::var(k).ok())?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn base() -> EngineConfig {
        EngineConfig::from_json(r#"{"experts":[],"charts":{"hc":"hc.csv","ac":"ac.csv"}}"#, Path::new("/cfg")).unwrap()
    }

    #[test]
    fn env_wins_over_file() {
        let env: BTreeMap<&str, &str> = [
            (ENV_RUNS_DIR, "/tmp/runs"),
            (ENV_PORT, "9001"),
            (ENV_CHART_HC, "/data/hc.csv"),
            (ENV_CLOCK, "2026-03-01T00:00:00Z"),
            (ENV_LEXICON, ""),
        ]
        .into();
        let mut cfg = base();
        apply_overrides(&mut cfg, |k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(cfg.runs_dir, Some(PathBuf::from("/tmp/runs")));
        assert_eq!(cfg.port, Some(9001));
        assert_eq!(cfg.charts.hc, PathBuf::from("/data/hc.csv"));
        assert_eq!(cfg.charts.ac, PathBuf::from("/cfg/ac.csv"));
        assert_eq!(cfg.lexicon, None);
        assert_eq!(cfg.clock.as_deref(), Some("2026-03-01T00:00:00Z"));
    }

    #[test]
    fn bad_port_is_rejected() {
        let mut cfg = base();
        assert!(apply_overrides(&mut cfg, |k| (k == ENV_PORT).then(|| "http".to_string())).is_err());
    }
}
