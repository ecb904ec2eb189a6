//! Resumable pipeline state, persisted as JSON after every step.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::classes::ClassSet;
use crate::error::{Error, Result};
use crate::metrics::CohortSummary;
use crate::nifti::write_atomic;
use crate::volume::Spacing;

/// Test hook: abort the process right after this many state checkpoints
/// have been written (counted over the lifetime of the state file).
pub const ABORT_ENV: &str = "ITERSEG_ABORT_AFTER_CHECKPOINTS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Tumor,
    Organ,
    Merge,
    Done,
}

impl Phase {
    /// Classes a phase produces labels for.
    pub fn classes(self) -> ClassSet {
        match self {
            Phase::Tumor => ClassSet::TUMOR,
            Phase::Organ => ClassSet::ORGANS,
            Phase::Merge | Phase::Done => ClassSet::ALL,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Tumor => "tumor",
            Phase::Organ => "organ",
            Phase::Merge => "merge",
            Phase::Done => "done",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseStatus {
    #[default]
    Pending,
    PseudoLabeled,
    Fused,
    Failed,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseState {
    pub status: CaseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fused_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Steps of the round in progress that have completed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundProgress {
    pub trained: bool,
    pub predicted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub phase: Phase,
    pub round: u32,
    /// Cases whose fused label from this round is on disk.
    pub fused: Vec<String>,
    pub failed: Vec<String>,
    /// Labeled voxels over all cases of the phase's track after the round.
    pub labeled_voxels: u64,
    pub total_voxels: u64,
    /// Fraction of voxels whose label changed since the previous round.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub changed_fraction: Option<f64>,
    /// Mean DSC over held-out cases and the phase's classes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heldout_mean_dsc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heldout: Option<CohortSummary>,
}

impl RoundSummary {
    pub fn coverage(&self) -> f64 {
        if self.total_voxels == 0 {
            0.0
        } else {
            self.labeled_voxels as f64 / self.total_voxels as f64
        }
    }
}

/// Effective settings the run was started with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub config: Value,
    pub target_spacing: Spacing,
    pub flip_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub phase: Phase,
    /// Completed rounds of the current phase.
    pub round: u32,
    pub progress: RoundProgress,
    /// Set when the stopping rule ended the current phase early.
    #[serde(default)]
    pub converged: bool,
    pub cases: BTreeMap<String, CaseState>,
    #[serde(default)]
    pub final_digests: BTreeMap<String, String>,
    #[serde(default)]
    pub history: Vec<RoundSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot: Option<ConfigSnapshot>,
    #[serde(default)]
    pub checkpoints: u64,
}

impl PipelineState {
    pub fn new(first_phase: Phase) -> Self {
        PipelineState {
            phase: first_phase,
            round: 0,
            progress: RoundProgress::default(),
            converged: false,
            cases: BTreeMap::new(),
            final_digests: BTreeMap::new(),
            history: Vec::new(),
            snapshot: None,
            checkpoints: 0,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    pub fn load_or_new(path: &Path, first_phase: Phase) -> Result<Self> {
        if path.exists() {
            PipelineState::load(path)
        } else {
            Ok(PipelineState::new(first_phase))
        }
    }

    /// Writes the state atomically and counts the checkpoint.
    pub fn save(&mut self, path: &Path) -> Result<()> {
        self.checkpoints += 1;
        let text = serde_json::to_string_pretty(self).expect("state serializes");
        write_atomic(path, text.as_bytes())?;
        if let Some(limit) = abort_limit() {
            if self.checkpoints >= limit {
                warn!("aborting after checkpoint {} ({ABORT_ENV})", self.checkpoints);
                std::process::abort();
            }
        }
        Ok(())
    }

    pub fn case_mut(&mut self, case_id: &str) -> &mut CaseState {
        self.cases.entry(case_id.to_string()).or_default()
    }

    /// Clears per-case progress for a new round.
    pub fn start_round(&mut self) {
        self.progress = RoundProgress::default();
        self.cases.clear();
    }

    pub fn last_summary(&self, phase: Phase) -> Option<&RoundSummary> {
        self.history.iter().rev().find(|s| s.phase == phase)
    }
}

fn abort_limit() -> Option<u64> {
    std::env::var(ABORT_ENV).ok()?.parse().ok()
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a file, or `None` if it cannot be read.
pub fn digest_file(path: &Path) -> Option<String> {
    fs::read(path).ok().map(|b| digest_bytes(&b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        let mut s = PipelineState::new(Phase::Tumor);
        s.case_mut("a").status = CaseStatus::Fused;
        s.case_mut("a").fused_digest = Some(digest_bytes(b"x"));
        s.save(&path).unwrap();
        let back = PipelineState::load(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.checkpoints, 1);
    }

    #[test]
    fn start_round_resets_cases() {
        let mut s = PipelineState::new(Phase::Organ);
        s.case_mut("a").status = CaseStatus::Failed;
        s.progress.trained = true;
        s.start_round();
        assert!(s.cases.is_empty());
        assert!(!s.progress.trained);
    }

    #[test]
    fn sha256_known_value() {
        assert_eq!(
            digest_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
