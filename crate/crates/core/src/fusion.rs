//! Combining partial ground truth with pseudo-label sources.
//!
//! Three operations cover the label bookkeeping of the iterative scheme:
//! voxelwise voting across several pseudo-label sources, filling a partial
//! annotation from a pseudo label, and overlaying tumor onto organs.

use serde::{Deserialize, Serialize};

use crate::classes::{ClassSet, BACKGROUND, NUM_CLASSES, TUMOR};
use crate::error::{Error, Result};
use crate::volume::LabelMap;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionPolicy {
    /// Source identifiers, highest priority first. Breaks voting ties.
    pub source_priority: Vec<String>,
    /// Ground-truth foreground always wins over pseudo labels.
    pub gt_overrides: bool,
    /// Treat background of a partial annotation as reliable for its
    /// annotated classes. When false, pseudo labels may fill it.
    pub gt_background_trust: bool,
    pub tumor_overrides_organ: bool,
    /// Minimum votes for a winner; below it the voxel becomes background.
    /// `None` takes the plurality winner.
    pub min_votes: Option<u32>,
}

/// Identifier of the pipeline's own pseudo labels in `source_priority`.
pub const OWN_SOURCE: &str = "own";

impl Default for FusionPolicy {
    fn default() -> Self {
        FusionPolicy {
            source_priority: vec![OWN_SOURCE.to_string()],
            gt_overrides: true,
            gt_background_trust: false,
            tumor_overrides_organ: true,
            min_votes: None,
        }
    }
}

impl FusionPolicy {
    pub fn with_priority<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        FusionPolicy {
            source_priority: ids.into_iter().map(Into::into).collect(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_priority.is_empty() {
            return Err(Error::InvalidParams("source_priority must not be empty".into()));
        }
        for (i, id) in self.source_priority.iter().enumerate() {
            if self.source_priority[..i].contains(id) {
                return Err(Error::InvalidParams(format!("source_priority lists {id:?} twice")));
            }
        }
        if self.min_votes == Some(0) {
            return Err(Error::InvalidParams("min_votes must be positive".into()));
        }
        Ok(())
    }

    fn rank(&self, id: &str) -> Result<usize> {
        self.source_priority
            .iter()
            .position(|s| s == id)
            .ok_or_else(|| Error::UnknownSource(id.to_string()))
    }
}

/// A ground-truth map that annotates only some classes. Voxels of the other
/// classes are indistinguishable from background.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialLabel {
    map: LabelMap,
    annotated: ClassSet,
}

impl PartialLabel {
    pub fn new(map: LabelMap, annotated: ClassSet) -> Result<Self> {
        if let Some(&class) = map
            .data()
            .iter()
            .find(|&&v| v != BACKGROUND && !annotated.contains(v))
        {
            return Err(Error::UnannotatedClass { class });
        }
        Ok(PartialLabel { map, annotated })
    }

    pub fn fully_annotated(map: LabelMap) -> Self {
        PartialLabel {
            map,
            annotated: ClassSet::ALL,
        }
    }

    pub fn map(&self) -> &LabelMap {
        &self.map
    }

    pub fn annotated(&self) -> ClassSet {
        self.annotated
    }

    /// Keeps only `classes`: other labels become background and drop out of
    /// the annotated set.
    pub fn restrict(&self, classes: ClassSet) -> PartialLabel {
        let keep = self.annotated.intersect(classes);
        let data = self
            .map
            .data()
            .iter()
            .map(|&v| if keep.contains(v) { v } else { BACKGROUND })
            .collect();
        PartialLabel {
            map: self.map.with_labels(data).expect("same geometry, values subset"),
            annotated: keep,
        }
    }
}

/// Voxelwise plurality vote. Background counts as a vote. Ties go to the
/// highest-priority source whose vote is among the tied classes.
pub fn majority_vote(sources: &[(&str, &LabelMap)], policy: &FusionPolicy) -> Result<LabelMap> {
    policy.validate()?;
    let (_, first) = sources.first().ok_or(Error::EmptyInput("no label sources to vote"))?;

    let mut ranked = Vec::with_capacity(sources.len());
    for &(id, map) in sources {
        first.check_same_dims(map)?;
        ranked.push((policy.rank(id)?, id, map.data()));
    }
    ranked.sort_by_key(|&(rank, _, _)| rank);
    for pair in ranked.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(Error::DuplicateSource(pair[0].1.to_string()));
        }
    }

    let mut out = Vec::with_capacity(first.len());
    let mut counts = [0u32; NUM_CLASSES];
    for i in 0..first.len() {
        counts.fill(0);
        for (_, _, data) in &ranked {
            counts[data[i] as usize] += 1;
        }
        let best = *counts.iter().max().expect("non-empty");
        let winner = ranked
            .iter()
            .map(|(_, _, data)| data[i])
            .find(|&v| counts[v as usize] == best)
            .expect("some source voted for the maximum");
        let winner = match policy.min_votes {
            Some(k) if best < k => BACKGROUND,
            _ => winner,
        };
        out.push(winner);
    }
    first.with_labels(out)
}

/// Fills a partial annotation from a pseudo label.
///
/// Ground-truth foreground is kept (and wins over pseudo foreground when
/// `gt_overrides`). Elsewhere the pseudo label is used, except that pseudo
/// votes for an annotated class on annotated background are dropped when
/// `gt_background_trust` is set.
pub fn merge_partial(gt: &PartialLabel, pseudo: &LabelMap, policy: &FusionPolicy) -> Result<LabelMap> {
    gt.map.check_same_dims(pseudo)?;
    let annotated = gt.annotated;
    let out = gt
        .map
        .data()
        .iter()
        .zip(pseudo.data())
        .map(|(&g, &p)| {
            if g != BACKGROUND && (policy.gt_overrides || p == BACKGROUND) {
                g
            } else if g == BACKGROUND && policy.gt_background_trust && annotated.contains(p) {
                BACKGROUND
            } else {
                p
            }
        })
        .collect();
    gt.map.with_labels(out)
}

/// Overlays a tumor map (values {0, 14}) onto an organ map (no 14).
pub fn merge_organ_tumor(organ: &LabelMap, tumor: &LabelMap, tumor_overrides_organ: bool) -> Result<LabelMap> {
    organ.check_same_dims(tumor)?;
    if organ.data().contains(&TUMOR) {
        return Err(Error::UnexpectedClass {
            map: "organ",
            class: TUMOR,
        });
    }
    if let Some(&class) = tumor.data().iter().find(|&&v| v != BACKGROUND && v != TUMOR) {
        return Err(Error::UnexpectedClass { map: "tumor", class });
    }
    let out = organ
        .data()
        .iter()
        .zip(tumor.data())
        .map(|(&o, &t)| {
            if t == TUMOR && (tumor_overrides_organ || o == BACKGROUND) {
                TUMOR
            } else {
                o
            }
        })
        .collect();
    organ.with_labels(out)
}
