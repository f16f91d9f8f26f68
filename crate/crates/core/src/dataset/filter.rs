//! Clear-scene filter over scene metadata.
//!
//! Thresholds and date lists are data: they are read from a TOML document
//! (see `config/cloud_filter.toml`) rather than hard-coded.

use std::collections::BTreeSet;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::types::SceneMeta;
use crate::error::{Error, Result};

const DEFAULT_FILTER: &str = include_str!("../../config/cloud_filter.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub version: u32,
    pub clear: ClearBranch,
    pub partial: PartialBranch,
    pub edge: EdgeBranch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClearBranch {
    pub green_q05_max: f64,
    #[serde(default)]
    pub exclude: Vec<ExclusionRule>,
}

/// Excludes a scene when its date is listed and every present qualifier
/// matches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExclusionRule {
    pub dates: BTreeSet<NaiveDate>,
    #[serde(default)]
    pub instrument: Option<String>,
    #[serde(default)]
    pub station_in: Option<Vec<String>>,
    #[serde(default)]
    pub station_not_in: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialBranch {
    pub green_q05_max: f64,
    pub green_q50_max: f64,
    pub green_q95_max: f64,
    pub allow_dates: BTreeSet<NaiveDate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeBranch {
    pub cover_min: f64,
    pub green_q95_max: f64,
}

impl FilterConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("cloud filter: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

impl Default for FilterConfig {
    /// The filter shipped with the crate.
    fn default() -> Self {
        Self::from_toml(DEFAULT_FILTER).expect("bundled cloud filter parses")
    }
}

impl ExclusionRule {
    fn matches(&self, meta: &SceneMeta) -> bool {
        if !self.dates.contains(&meta.date) {
            return false;
        }
        if let Some(instrument) = &self.instrument {
            if &meta.instrument != instrument {
                return false;
            }
        }
        let station = meta.station_id.as_str();
        if let Some(list) = &self.station_in {
            if !list.iter().any(|s| s == station) {
                return false;
            }
        }
        if let Some(list) = &self.station_not_in {
            if list.iter().any(|s| s == station) {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Clear,
    PartialCloud,
    Edge,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Accepted(Branch),
    /// One diagnostic per branch explaining why it failed.
    Rejected(Vec<String>),
}

impl Verdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Verdict::Accepted(_))
    }

    pub fn describe(&self) -> String {
        match self {
            Verdict::Accepted(b) => format!("accepted:{b:?}"),
            Verdict::Rejected(reasons) => format!("rejected:{}", reasons.join("; ")),
        }
    }
}

fn quantile(name: &str, value: Option<f64>) -> std::result::Result<f64, String> {
    match value {
        Some(v) if v.is_finite() => Ok(v),
        Some(v) => Err(format!("{name} is not finite ({v})")),
        None => Err(format!("{name} missing")),
    }
}

fn below(name: &str, value: Option<f64>, max: f64) -> std::result::Result<(), String> {
    let v = quantile(name, value)?;
    if v < max {
        Ok(())
    } else {
        Err(format!("{name}={v} not < {max}"))
    }
}

impl FilterConfig {
    fn clear_branch(&self, meta: &SceneMeta) -> std::result::Result<(), String> {
        if meta.cover != 1.0 {
            return Err(format!("cover={} != 1", meta.cover));
        }
        if meta.cloud_cover != 0.0 {
            return Err(format!("cloud_cover={} != 0", meta.cloud_cover));
        }
        below("green_q05", meta.green_q05, self.clear.green_q05_max)?;
        if let Some(i) = self.clear.exclude.iter().position(|r| r.matches(meta)) {
            return Err(format!("excluded by rule {i}"));
        }
        Ok(())
    }

    fn partial_branch(&self, meta: &SceneMeta) -> std::result::Result<(), String> {
        if meta.cover != 1.0 {
            return Err(format!("cover={} != 1", meta.cover));
        }
        if !(meta.cloud_cover > 0.0 && meta.cloud_cover < 1.0) {
            return Err(format!("cloud_cover={} not in (0, 1)", meta.cloud_cover));
        }
        let p = &self.partial;
        below("green_q05", meta.green_q05, p.green_q05_max)?;
        below("green_q50", meta.green_q50, p.green_q50_max)?;
        below("green_q95", meta.green_q95, p.green_q95_max)?;
        if !p.allow_dates.contains(&meta.date) {
            return Err(format!("{} not on the allow list", meta.date));
        }
        Ok(())
    }

    fn edge_branch(&self, meta: &SceneMeta) -> std::result::Result<(), String> {
        if !(meta.cover > self.edge.cover_min && meta.cover < 1.0) {
            return Err(format!(
                "cover={} not in ({}, 1)",
                meta.cover, self.edge.cover_min
            ));
        }
        below("green_q95", meta.green_q95, self.edge.green_q95_max)
    }

    /// Evaluates the three branches as a disjunction.
    pub fn classify(&self, meta: &SceneMeta) -> Verdict {
        let mut reasons = Vec::with_capacity(3);
        for (branch, outcome) in [
            (Branch::Clear, self.clear_branch(meta)),
            (Branch::PartialCloud, self.partial_branch(meta)),
            (Branch::Edge, self.edge_branch(meta)),
        ] {
            match outcome {
                Ok(()) => return Verdict::Accepted(branch),
                Err(reason) => reasons.push(format!("{branch:?}: {reason}")),
            }
        }
        Verdict::Rejected(reasons)
    }
}

pub fn apply_cloud_filter(meta: &SceneMeta, config: &FilterConfig) -> bool {
    config.classify(meta).is_accepted()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::types::StationId;

    fn meta(cover: f64, cloud: f64, q05: f64, q50: f64, q95: f64) -> SceneMeta {
        SceneMeta {
            station_id: StationId::new("UB"),
            date: NaiveDate::from_ymd_opt(2019, 2, 1).unwrap(),
            instrument: "PS2".into(),
            cover,
            cloud_cover: cloud,
            green_q05: Some(q05),
            green_q50: Some(q50),
            green_q95: Some(q95),
            acquired: None,
        }
    }

    #[test]
    fn bundled_config_parses() {
        let cfg = FilterConfig::default();
        assert_eq!(cfg.clear.exclude.len(), 4);
        assert_eq!(cfg.partial.allow_dates.len(), 63);
    }

    #[test]
    fn clear_scene_accepted() {
        let cfg = FilterConfig::default();
        assert!(apply_cloud_filter(&meta(1.0, 0.0, 0.10, 0.12, 0.3), &cfg));
    }

    #[test]
    fn half_cover_rejected() {
        let cfg = FilterConfig::default();
        assert!(!apply_cloud_filter(&meta(0.5, 0.0, 0.01, 0.01, 0.01), &cfg));
    }

    #[test]
    fn edge_branch_accepts_dark_partial_cover() {
        let cfg = FilterConfig::default();
        let mut m = meta(0.8, 0.3, 0.9, 0.9, 0.15);
        m.green_q05 = None;
        assert_eq!(cfg.classify(&m), Verdict::Accepted(Branch::Edge));
    }

    #[test]
    fn missing_quantile_is_a_diagnostic() {
        let cfg = FilterConfig::default();
        let mut m = meta(1.0, 0.0, 0.1, 0.1, 0.1);
        m.green_q05 = None;
        match cfg.classify(&m) {
            Verdict::Rejected(reasons) => {
                assert!(reasons[0].contains("green_q05 missing"), "{reasons:?}")
            }
            v => panic!("unexpected {v:?}"),
        }
    }
}
