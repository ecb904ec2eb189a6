//! Pipeline configuration: a JSON file merged over defaults, with dotted-key
//! overrides applied last.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::segmenter::SegmenterContract;
use super::state::Phase;
use crate::error::{Error, Result};
use crate::fusion::FusionPolicy;
use crate::metrics::NsdParams;
use crate::monitor::EfficiencyParams;
use crate::postprocess::PostprocessParams;
use crate::preprocess::NormalizationParams;
use crate::volume::Spacing;

/// Target voxel spacing: the manifest median, or explicit millimeters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTarget", into = "RawTarget")]
pub enum ResampleTarget {
    #[default]
    Median,
    Explicit(Spacing),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawTarget {
    Name(String),
    Mm([f64; 3]),
}

impl TryFrom<RawTarget> for ResampleTarget {
    type Error = Error;

    fn try_from(raw: RawTarget) -> Result<Self> {
        match raw {
            RawTarget::Name(s) if s == "median" => Ok(ResampleTarget::Median),
            RawTarget::Name(s) => Err(Error::InvalidParams(format!(
                "resample_target must be \"median\" or [dx, dy, dz], got {s:?}"
            ))),
            RawTarget::Mm(a) => Ok(ResampleTarget::Explicit(Spacing::try_from(a)?)),
        }
    }
}

impl From<ResampleTarget> for RawTarget {
    fn from(t: ResampleTarget) -> Self {
        match t {
            ResampleTarget::Median => RawTarget::Name("median".into()),
            ResampleTarget::Explicit(s) => RawTarget::Mm(s.as_array()),
        }
    }
}

/// A directory of `<case>.nii.gz` label maps from another algorithm.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExternalSource {
    pub id: String,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub normalization: NormalizationParams,
    pub resample_target: ResampleTarget,
    pub fusion: FusionPolicy,
    pub nsd: NsdParams,
    /// Eight-way flip augmentation at prediction time (probability output
    /// mode only).
    pub tta: bool,
    pub postprocess: PostprocessParams,
    pub rounds_tumor: u32,
    pub rounds_organ: u32,
    pub phase_order: Vec<Phase>,
    /// End a phase early once the fraction of voxels whose pseudo label
    /// changed between consecutive rounds drops below this value.
    pub stop_epsilon: Option<f64>,
    pub workers: usize,
    pub segmenter: SegmenterContract,
    pub external_sources: Vec<ExternalSource>,
    /// Fully annotated cases scored after every round.
    pub eval_manifest: Option<PathBuf>,
    pub efficiency: EfficiencyParams,
    /// Directory relative paths in this config resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            normalization: NormalizationParams::default(),
            resample_target: ResampleTarget::Median,
            fusion: FusionPolicy::default(),
            nsd: NsdParams::default(),
            tta: true,
            postprocess: PostprocessParams::default(),
            rounds_tumor: 2,
            rounds_organ: 2,
            phase_order: vec![Phase::Tumor, Phase::Organ],
            stop_epsilon: None,
            workers: 4,
            segmenter: SegmenterContract::default(),
            external_sources: Vec::new(),
            eval_manifest: None,
            efficiency: EfficiencyParams::default(),
            base_dir: PathBuf::new(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.normalization.validate()?;
        self.fusion.validate()?;
        self.nsd.validate()?;
        if self.workers == 0 {
            return Err(Error::InvalidParams("workers must be at least 1".into()));
        }
        let mut order = self.phase_order.clone();
        order.sort();
        order.dedup();
        if order.len() != self.phase_order.len()
            || self.phase_order.iter().any(|p| !matches!(p, Phase::Tumor | Phase::Organ))
        {
            return Err(Error::InvalidParams(format!(
                "phase_order must list tumor and/or organ once each, got {:?}",
                self.phase_order
            )));
        }
        if let Some(eps) = self.stop_epsilon {
            if !(eps.is_finite() && eps >= 0.0) {
                return Err(Error::InvalidParams(format!("stop_epsilon must be >= 0, got {eps}")));
            }
        }
        for (i, s) in self.external_sources.iter().enumerate() {
            if s.id == crate::fusion::OWN_SOURCE || self.external_sources[..i].iter().any(|o| o.id == s.id) {
                return Err(Error::InvalidParams(format!("external source id {:?} is reserved or repeated", s.id)));
            }
        }
        Ok(())
    }

    pub fn rounds(&self, phase: Phase) -> u32 {
        match phase {
            Phase::Tumor => self.rounds_tumor,
            Phase::Organ => self.rounds_organ,
            _ => 0,
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    /// Voting priority: configured order, with any source it omits appended
    /// after it (own labels first).
    pub fn vote_policy(&self) -> FusionPolicy {
        let mut policy = self.fusion.clone();
        let ids = std::iter::once(crate::fusion::OWN_SOURCE.to_string())
            .chain(self.external_sources.iter().map(|s| s.id.clone()));
        for id in ids {
            if !policy.source_priority.contains(&id) {
                policy.source_priority.push(id);
            }
        }
        policy
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Builds the effective config: defaults, then `file` (if any), then
    /// each `key=value` override. Values parse as JSON, falling back to a
    /// plain string.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = PipelineConfig::default().to_value();
        let mut base_dir = PathBuf::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let from_file: Value =
                serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
            merge(&mut value, from_file);
            base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let mut cfg: PipelineConfig = serde_json::from_value(value).map_err(|e| Error::json("config", e))?;
        cfg.base_dir = base_dir;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Recursively overlays `patch` onto `base`; objects merge, other values
/// replace.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Sets a dotted key such as `fusion.min_votes=2`. The key must exist in
/// the defaults.
pub fn apply_override(value: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::InvalidParams(format!("override {assignment:?} is not key=value")))?;
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut slot = value;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| Error::InvalidParams(format!("unknown config key {key:?}")))?;
    }
    *slot = parsed;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = PipelineConfig::default();
        let back: PipelineConfig = serde_json::from_value(cfg.to_value()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.to_value()["resample_target"], "median");
        assert_eq!(cfg.to_value()["normalization"]["clip_lo"], -970.0);
    }

    #[test]
    fn overrides_apply_by_dotted_key() {
        let cfg = PipelineConfig::load(
            None,
            &[
                "fusion.min_votes=2".into(),
                "rounds_tumor=3".into(),
                "resample_target=[1.0,1.0,2.5]".into(),
                "postprocess.connectivity=6".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.fusion.min_votes, Some(2));
        assert_eq!(cfg.rounds_tumor, 3);
        assert_eq!(
            cfg.resample_target,
            ResampleTarget::Explicit(Spacing::new(1.0, 1.0, 2.5).unwrap())
        );
        assert!(PipelineConfig::load(None, &["no.such.key=1".into()]).is_err());
        assert!(PipelineConfig::load(None, &["rounds_tumor".into()]).is_err());
        assert!(PipelineConfig::load(None, &["resample_target=mean".into()]).is_err());
    }

    #[test]
    fn file_values_merge_over_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"fusion": {"gt_overrides": false}, "workers": 2}"#).unwrap();
        let cfg = PipelineConfig::load(Some(&path), &["workers=3".into()]).unwrap();
        assert!(!cfg.fusion.gt_overrides);
        assert_eq!(cfg.fusion.source_priority, vec!["own".to_string()]);
        assert_eq!(cfg.workers, 3);
        assert_eq!(cfg.base_dir, dir.path());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(PipelineConfig::load(None, &["workers=0".into()]).is_err());
        assert!(PipelineConfig::load(None, &["normalization.std=0".into()]).is_err());
        assert!(PipelineConfig::load(None, &[r#"phase_order=["tumor","tumor"]"#.into()]).is_err());
    }

    #[test]
    fn vote_policy_appends_sources() {
        let cfg = PipelineConfig {
            external_sources: vec![ExternalSource {
                id: "winner".into(),
                dir: "ext".into(),
            }],
            ..PipelineConfig::default()
        };
        assert_eq!(cfg.vote_policy().source_priority, vec!["own".to_string(), "winner".to_string()]);
    }
}
