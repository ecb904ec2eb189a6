//! Accuracy metrics: Dice similarity (DSC) and normalized surface Dice (NSD)
//! per class, and cohort summaries in reporting order.
//!
//! Scores are fractions in [0, 1]. When both masks are empty a score is
//! 1.0; when exactly one is empty it is 0.0.

mod edt;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use edt::{edt, edt_squared, surface_voxels, DistanceField};

use crate::classes::{class_name, is_organ, MAX_CLASS};
use crate::error::{Error, Result};
use crate::volume::{Dims, LabelMap, Spacing, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NsdParams {
    /// Surface tolerance in millimeters.
    pub tau: f64,
}

impl Default for NsdParams {
    fn default() -> Self {
        NsdParams { tau: 1.0 }
    }
}

impl NsdParams {
    pub fn validate(&self) -> Result<()> {
        if self.tau.is_finite() && self.tau > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("NSD tolerance must be > 0, got {}", self.tau)))
        }
    }
}

/// `2 |P ∩ G| / (|P| + |G|)` over nonzero voxels.
pub fn dsc(pred: &Volume<u8>, gt: &Volume<u8>) -> Result<f64> {
    pred.check_same_dims(gt)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(gt.data()) {
        let (a, b) = (a != 0, b != 0);
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
    }
    Ok(match (p, g) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => 2.0 * both as f64 / (p + g) as f64,
    })
}

/// Inclusive bounding box of nonzero voxels in either mask, grown by one
/// voxel where the grid allows.
fn joint_bbox(a: &Volume<u8>, b: &Volume<u8>) -> Option<([usize; 3], [usize; 3])> {
    let d = a.dims();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, (&x, &y)) in a.data().iter().zip(b.data()).enumerate() {
        if x == 0 && y == 0 {
            continue;
        }
        any = true;
        let (cx, cy, cz) = d.coords(i);
        for (axis, c) in [cx, cy, cz].into_iter().enumerate() {
            lo[axis] = lo[axis].min(c);
            hi[axis] = hi[axis].max(c);
        }
    }
    if !any {
        return None;
    }
    for axis in 0..3 {
        lo[axis] = lo[axis].saturating_sub(1);
        hi[axis] = (hi[axis] + 1).min(d.0[axis] - 1);
    }
    Some((lo, hi))
}

fn crop(v: &Volume<u8>, lo: [usize; 3], hi: [usize; 3]) -> Volume<u8> {
    let dims = Dims([hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1]);
    Volume::from_fn(dims, v.spacing(), |x, y, z| v.get(x + lo[0], y + lo[1], z + lo[2]))
}

/// Surface voxels of `from` within `tau` of the surface of `to`, and the
/// size of `from`'s surface.
fn surface_hits(from_surface: &Volume<u8>, to_dist: &DistanceField<f64>, tau: f64) -> (usize, usize) {
    let mut hits = 0;
    let mut total = 0;
    for (i, &s) in from_surface.data().iter().enumerate() {
        if s != 0 {
            total += 1;
            if to_dist.at(i) <= tau {
                hits += 1;
            }
        }
    }
    (hits, total)
}

/// Normalized surface Dice at tolerance `params.tau`, with distances
/// measured using `spacing`.
pub fn nsd(pred: &Volume<u8>, gt: &Volume<u8>, spacing: Spacing, params: &NsdParams) -> Result<f64> {
    params.validate()?;
    pred.check_same_grid(gt)?;
    pred.check_binary()?;
    gt.check_binary()?;
    let p_any = pred.data().iter().any(|&v| v != 0);
    let g_any = gt.data().iter().any(|&v| v != 0);
    match (p_any, g_any) {
        (false, false) => return Ok(1.0),
        (false, true) | (true, false) => return Ok(0.0),
        _ => {}
    }

    // Distances only matter inside the joint bounding box; the one-voxel
    // margin keeps surfaces identical to the full-grid definition.
    let (lo, hi) = joint_bbox(pred, gt).expect("both masks non-empty");
    let (pred, gt) = (crop(pred, lo, hi), crop(gt, lo, hi));
    let sp = surface_voxels(&pred)?;
    let sg = surface_voxels(&gt)?;
    let dist_to_g = edt::<f64>(&sg, spacing)?;
    let dist_to_p = edt::<f64>(&sp, spacing)?;
    let (hp, np) = surface_hits(&sp, &dist_to_g, params.tau);
    let (hg, ng) = surface_hits(&sg, &dist_to_p, params.tau);
    Ok((hp + hg) as f64 / (np + ng) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub dsc: f64,
    pub nsd: f64,
    pub gt_present: bool,
    pub pred_present: bool,
}

/// Which organ classes enter the organ averages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PresencePolicy {
    /// All 13 organs, absent-in-both counted as 1.0.
    All,
    /// Organs present in the ground truth or the prediction.
    #[default]
    AnyPresent,
    /// Organs present in the ground truth.
    GtPresent,
}

impl PresencePolicy {
    fn includes(self, s: &ClassScore) -> bool {
        match self {
            PresencePolicy::All => true,
            PresencePolicy::AnyPresent => s.gt_present || s.pred_present,
            PresencePolicy::GtPresent => s.gt_present,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub case_id: String,
    pub per_class: BTreeMap<u8, ClassScore>,
    pub organ_average_dsc: f64,
    pub organ_average_nsd: f64,
}

impl MetricReport {
    pub fn class(&self, class: u8) -> Option<&ClassScore> {
        self.per_class.get(&class)
    }

    fn from_scores(case_id: String, per_class: BTreeMap<u8, ClassScore>, policy: PresencePolicy) -> Self {
        let included: Vec<&ClassScore> = per_class
            .iter()
            .filter(|(&c, s)| is_organ(c) && policy.includes(s))
            .map(|(_, s)| s)
            .collect();
        let (organ_average_dsc, organ_average_nsd) = if included.is_empty() {
            (1.0, 1.0)
        } else {
            let n = included.len() as f64;
            (
                included.iter().map(|s| s.dsc).sum::<f64>() / n,
                included.iter().map(|s| s.nsd).sum::<f64>() / n,
            )
        };
        MetricReport {
            case_id,
            per_class,
            organ_average_dsc,
            organ_average_nsd,
        }
    }
}

pub fn evaluate_case(case_id: &str, pred: &LabelMap, gt: &LabelMap, params: &NsdParams) -> Result<MetricReport> {
    evaluate_case_with(case_id, pred, gt, params, PresencePolicy::default())
}

/// Scores every class 1..=14 and the organ averages.
pub fn evaluate_case_with(
    case_id: &str,
    pred: &LabelMap,
    gt: &LabelMap,
    params: &NsdParams,
    policy: PresencePolicy,
) -> Result<MetricReport> {
    params.validate()?;
    pred.check_same_grid(gt)?;
    let spacing = gt.spacing();
    let ph = pred.histogram();
    let gh = gt.histogram();
    let scores = (1..=MAX_CLASS)
        .into_par_iter()
        .map(|c| {
            let (p, g) = (pred.binarize(c), gt.binarize(c));
            Ok((
                c,
                ClassScore {
                    dsc: dsc(&p, &g)?,
                    nsd: nsd(&p, &g, spacing, params)?,
                    gt_present: gh[c as usize] > 0,
                    pred_present: ph[c as usize] > 0,
                },
            ))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(MetricReport::from_scores(case_id.to_string(), scores, policy))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub class: String,
    pub dsc: MeanStd,
    pub nsd: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    /// Classes 1..=14 in reporting order, then "Organ-Average".
    pub rows: Vec<SummaryRow>,
    pub cases: Vec<MetricReport>,
}

pub const ORGAN_AVERAGE: &str = "Organ-Average";

pub fn aggregate_cohort(reports: &[MetricReport]) -> Result<CohortSummary> {
    if reports.is_empty() {
        return Err(Error::EmptyInput("no metric reports to aggregate"));
    }
    let mut rows = Vec::with_capacity(MAX_CLASS as usize + 1);
    for c in 1..=MAX_CLASS {
        let scores: Vec<&ClassScore> = reports.iter().filter_map(|r| r.class(c)).collect();
        if scores.is_empty() {
            continue;
        }
        let d: Vec<f64> = scores.iter().map(|s| s.dsc).collect();
        let n: Vec<f64> = scores.iter().map(|s| s.nsd).collect();
        rows.push(SummaryRow {
            class: class_name(c).to_string(),
            dsc: mean_std(&d),
            nsd: mean_std(&n),
        });
    }
    let d: Vec<f64> = reports.iter().map(|r| r.organ_average_dsc).collect();
    let n: Vec<f64> = reports.iter().map(|r| r.organ_average_nsd).collect();
    rows.push(SummaryRow {
        class: ORGAN_AVERAGE.to_string(),
        dsc: mean_std(&d),
        nsd: mean_std(&n),
    });
    Ok(CohortSummary {
        rows,
        cases: reports.to_vec(),
    })
}

impl CohortSummary {
    pub fn row(&self, class: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.class == class)
    }

    /// `class,dsc_mean,dsc_std,nsd_mean,nsd_std`, one row per class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,dsc_mean,dsc_std,nsd_mean,nsd_std\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6}",
                r.class, r.dsc.mean, r.dsc.std, r.nsd.mean, r.nsd.std
            )
            .expect("writing to a String");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    /// Human-readable table with percentages.
    pub fn display_table(&self) -> String {
        let mut s = format!("{:<22} {:>16} {:>16}\n", "Target", "DSC (%)", "NSD (%)");
        for r in &self.rows {
            writeln!(
                s,
                "{:<22} {:>8.2} ± {:<5.2} {:>8.2} ± {:<5.2}",
                r.class,
                100.0 * r.dsc.mean,
                100.0 * r.dsc.std,
                100.0 * r.nsd.mean,
                100.0 * r.nsd.std
            )
            .expect("writing to a String");
        }
        s
    }
}
