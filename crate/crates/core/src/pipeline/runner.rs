//! Teacher → pseudo-label → student rounds, the final merge, and resume.
//!
//! Every case carries two label tracks, one per phase: tumor labels
//! (values {0, 14}) and organ labels (values 0..=13). A round trains the
//! segmenter on the current track labels, predicts the cases that lack a
//! full annotation for the phase, cleans and fuses the predictions with the
//! partial ground truth, and records the result. The merge step overlays
//! the two tracks into one 14-class map per case.
//!
//! Work files live next to the state file:
//!
//! ```text
//! images/<case>.nii.gz            preprocessed image
//! gt/<case>.nii.gz                ground truth on the target grid
//! eval/{images,gt}/<case>.nii.gz  held-out cases
//! rounds/<phase>_r<k>/...         segmenter directories and logs
//! pseudo/<phase>/r<k>/<case>.nii.gz
//! labels/<phase>/r<k>/<case>.nii.gz
//! final/<case>.nii.gz
//! reports/<phase>_r<k>.{csv,json}
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, ResampleTarget};
use super::manifest::{CaseRecord, Manifest, load_manifest};
use super::segmenter::OutputMode;
use super::state::{digest_bytes, digest_file, CaseStatus, ConfigSnapshot, Phase, PipelineState, RoundSummary};
use crate::classes::{ClassSet, BACKGROUND};
use crate::error::{Error, Result};
use crate::fusion::{majority_vote, merge_organ_tumor, merge_partial, PartialLabel, OWN_SOURCE};
use crate::metrics::{aggregate_cohort, evaluate_case, CohortSummary, MetricReport};
use crate::nifti::{encode_nifti, gzip, load_nifti, read_header, save_nifti, write_atomic};
use crate::postprocess::keep_largest;
use crate::preprocess::{clip_normalize, resample_image, resample_labels, ResampleSpec};
use crate::tta::{aggregate, apply_flip, argmax_labels, enumerate_flips, FlipSpec};
use crate::volume::{LabelMap, ProbMap, Spacing, Volume};

/// Where the pipeline keeps its files.
#[derive(Debug, Clone)]
pub struct WorkDir(PathBuf);

impl WorkDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        WorkDir(root.into())
    }

    pub fn root(&self) -> &Path {
        &self.0
    }

    pub fn image(&self, case: &str) -> PathBuf {
        self.0.join("images").join(nii(case))
    }

    pub fn gt(&self, case: &str) -> PathBuf {
        self.0.join("gt").join(nii(case))
    }

    pub fn eval_image(&self, case: &str) -> PathBuf {
        self.0.join("eval/images").join(nii(case))
    }

    pub fn eval_gt(&self, case: &str) -> PathBuf {
        self.0.join("eval/gt").join(nii(case))
    }

    pub fn round_dir(&self, phase: Phase, round: u32) -> PathBuf {
        self.0.join("rounds").join(format!("{phase}_r{round}"))
    }

    pub fn pseudo(&self, phase: Phase, round: u32, case: &str) -> PathBuf {
        self.0.join("pseudo").join(phase.name()).join(format!("r{round}")).join(nii(case))
    }

    pub fn fused(&self, phase: Phase, round: u32, case: &str) -> PathBuf {
        self.0.join("labels").join(phase.name()).join(format!("r{round}")).join(nii(case))
    }

    pub fn final_label(&self, case: &str) -> PathBuf {
        self.0.join("final").join(nii(case))
    }

    pub fn report(&self, phase: Phase, round: u32, ext: &str) -> PathBuf {
        self.0.join("reports").join(format!("{phase}_r{round}.{ext}"))
    }
}

fn nii(case: &str) -> String {
    format!("{case}.nii.gz")
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes a gzip-compressed label map atomically and returns its digest.
pub fn write_labels(map: &LabelMap, path: &Path) -> Result<String> {
    ensure_parent(path)?;
    let bytes = gzip(&encode_nifti(map.as_volume()));
    write_atomic(path, &bytes)?;
    Ok(digest_bytes(&bytes))
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    load_nifti(path)?.into_labels()
}

fn link_or_copy(src: &Path, dst: &Path) -> Result<()> {
    if fs::hard_link(src, dst).is_err() {
        fs::copy(src, dst).map_err(|e| Error::io(dst, e))?;
    }
    Ok(())
}

fn restrict(map: &LabelMap, classes: ClassSet) -> LabelMap {
    let data = map
        .data()
        .iter()
        .map(|&v| if classes.contains(v) { v } else { BACKGROUND })
        .collect();
    map.with_labels(data).expect("values subset")
}

fn is_teacher(case: &CaseRecord, phase: Phase) -> bool {
    case.annotated().is_superset(phase.classes())
}

/// Final output summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub target_spacing: Spacing,
    pub cases: Vec<FinalCase>,
    pub history: Vec<RoundSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalCase {
    pub case_id: String,
    pub path: PathBuf,
    pub digest: String,
    pub classes_present: Vec<u8>,
}

pub struct Pipeline {
    pub manifest: Manifest,
    pub eval: Option<Manifest>,
    pub config: PipelineConfig,
    pub state_path: PathBuf,
    pub work: WorkDir,
}

impl Pipeline {
    /// Work files go to the directory holding `state_path`.
    pub fn new(manifest: Manifest, config: PipelineConfig, state_path: impl Into<PathBuf>) -> Result<Self> {
        config.validate()?;
        let state_path = state_path.into();
        let root = match state_path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let eval = match &config.eval_manifest {
            Some(p) => Some(load_manifest(config.resolve(p))?),
            None => None,
        };
        if let Some(e) = &eval {
            if let Some(c) = e.cases.iter().find(|c| c.label_path.is_none()) {
                return Err(Error::InconsistentCase {
                    case: c.case_id.clone(),
                    detail: "held-out cases need a label".into(),
                });
            }
        }
        Ok(Pipeline {
            manifest,
            eval,
            config,
            state_path,
            work: WorkDir::new(root),
        })
    }

    fn first_phase(&self) -> Phase {
        self.config.phase_order.first().copied().unwrap_or(Phase::Merge)
    }

    fn next_phase(&self, phase: Phase) -> Phase {
        let order = &self.config.phase_order;
        match order.iter().position(|&p| p == phase) {
            Some(i) if i + 1 < order.len() => order[i + 1],
            _ => Phase::Merge,
        }
    }

    fn save(&self, state: &mut PipelineState) -> Result<()> {
        ensure_parent(&self.state_path)?;
        state.save(&self.state_path)
    }

    /// Loads the state file (or starts fresh) and reverts any case whose
    /// recorded files no longer match their digests.
    pub fn load_state(&self) -> Result<PipelineState> {
        let mut state = PipelineState::load_or_new(&self.state_path, self.first_phase())?;
        let (phase, round) = (state.phase, state.round + 1);
        let mut reverted = 0;
        for (case, cs) in state.cases.iter_mut() {
            let ok = match cs.status {
                CaseStatus::Fused => {
                    digest_file(&self.work.fused(phase, round, case)) == cs.fused_digest
                        && digest_file(&self.work.pseudo(phase, round, case)) == cs.pseudo_digest
                }
                CaseStatus::PseudoLabeled => digest_file(&self.work.pseudo(phase, round, case)) == cs.pseudo_digest,
                CaseStatus::Pending | CaseStatus::Failed => true,
            };
            if !ok {
                *cs = Default::default();
                reverted += 1;
            }
        }
        let before = state.final_digests.len();
        let work = &self.work;
        state
            .final_digests
            .retain(|case, d| digest_file(&work.final_label(case)).as_deref() == Some(d.as_str()));
        reverted += before - state.final_digests.len();
        if reverted > 0 {
            warn!("{reverted} case file(s) did not match recorded digests and will be recomputed");
        }
        if let Some(snap) = &state.snapshot {
            let mut current = self.config.to_value();
            current["resample_target"] = snap.config["resample_target"].clone();
            if current != snap.config {
                warn!("configuration differs from the snapshot this run started with");
            }
        }
        Ok(state)
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.workers)
            .build()
            .map_err(|e| Error::State(format!("worker pool: {e}")))
    }

    fn target_spacing(&self, state: &PipelineState) -> Result<Spacing> {
        state
            .snapshot
            .as_ref()
            .map(|s| s.target_spacing)
            .ok_or_else(|| Error::State("inputs have not been prepared".into()))
    }

    /// Normalizes and resamples every image (and ground truth) onto the
    /// target grid. Runs once per state file.
    pub fn prepare(&self, state: &mut PipelineState) -> Result<()> {
        if state.snapshot.is_some() {
            return Ok(());
        }
        let target = match self.config.resample_target {
            ResampleTarget::Median => self.manifest.median_spacing()?,
            ResampleTarget::Explicit(s) => s,
        };
        info!(
            "preparing {} cases on target spacing {:?}",
            self.manifest.cases.len(),
            target.as_array()
        );
        let spec = ResampleSpec::new(target);
        let mut jobs: Vec<(&Manifest, &CaseRecord, PathBuf, PathBuf)> = self
            .manifest
            .cases
            .iter()
            .map(|c| (&self.manifest, c, self.work.image(&c.case_id), self.work.gt(&c.case_id)))
            .collect();
        if let Some(e) = &self.eval {
            jobs.extend(
                e.cases
                    .iter()
                    .map(|c| (e, c, self.work.eval_image(&c.case_id), self.work.eval_gt(&c.case_id))),
            );
        }
        self.pool()?.install(|| {
            jobs.par_iter().try_for_each(|(m, case, img_out, gt_out)| {
                let raw = load_nifti(m.image_path(case))?.to_real::<f32>();
                let image = resample_image(&clip_normalize(&raw, &self.config.normalization)?, &spec)?;
                ensure_parent(img_out)?;
                save_nifti(&image, img_out, true)?;
                if let Some(lp) = m.label_path(case) {
                    let labels = load_nifti(&lp)?.into_labels()?;
                    raw.check_same_dims(&labels).map_err(|e| Error::InconsistentCase {
                        case: case.case_id.clone(),
                        detail: format!("label grid differs from image: {e}"),
                    })?;
                    let labels = resample_labels(&labels, &spec)?;
                    PartialLabel::new(labels.clone(), case.annotated()).map_err(|e| Error::InconsistentCase {
                        case: case.case_id.clone(),
                        detail: e.to_string(),
                    })?;
                    write_labels(&labels, gt_out)?;
                }
                Ok::<_, Error>(())
            })
        })?;
        let tta = self.tta_active();
        state.snapshot = Some(ConfigSnapshot {
            config: self.config.to_value(),
            target_spacing: target,
            flip_count: if tta { 8 } else { 1 },
        });
        self.save(state)
    }

    fn tta_active(&self) -> bool {
        self.config.tta && self.config.segmenter.output_mode == OutputMode::Probabilities
    }

    /// Ground truth of a training case on the target grid, restricted to
    /// `classes`. Unlabeled cases get an empty annotation.
    fn partial_gt(&self, case: &CaseRecord, classes: ClassSet) -> Result<PartialLabel> {
        if case.label_path.is_none() {
            let h = read_header(self.work.image(&case.case_id))?;
            return PartialLabel::new(LabelMap::background(h.dims, h.spacing), ClassSet::EMPTY);
        }
        let map = read_labels(&self.work.gt(&case.case_id))?;
        Ok(PartialLabel::new(map, case.annotated())?.restrict(classes))
    }

    /// The latest track label of `case` for `phase`: its fused label from
    /// the most recent completed round that produced one, else its ground
    /// truth for the phase's classes.
    fn track_label(&self, state: &PipelineState, phase: Phase, case: &CaseRecord) -> Result<LabelMap> {
        let latest = state
            .history
            .iter()
            .rev()
            .find(|s| s.phase == phase && s.fused.contains(&case.case_id));
        match latest {
            Some(s) => read_labels(&self.work.fused(phase, s.round, &case.case_id)),
            None => Ok(self.partial_gt(case, phase.classes())?.map().clone()),
        }
    }

    fn clean(&self, pred: &LabelMap, phase: Phase) -> LabelMap {
        let classes = phase.classes();
        let pp = &self.config.postprocess;
        keep_largest(&restrict(pred, classes), pp.classes.intersect(classes), pp.connectivity)
    }

    /// Writes segmenter inputs for `cases`: the image as is, or its eight
    /// flipped copies named `<case>__flip<i>`.
    fn write_inputs(&self, dir: &Path, cases: &[(String, PathBuf)]) -> Result<()> {
        reset_dir(dir)?;
        let tta = self.tta_active();
        self.pool()?.install(|| {
            cases.par_iter().try_for_each(|(id, src)| {
                if !tta {
                    return link_or_copy(src, &dir.join(nii(id)));
                }
                let img = load_nifti(src)?.to_real::<f32>();
                for f in enumerate_flips() {
                    save_nifti(&apply_flip(&img, f), dir.join(nii(&format!("{id}__flip{}", f.index()))), true)?;
                }
                Ok(())
            })
        })
    }

    /// Reads the segmenter's output for one case, undoing TTA. `None` when
    /// an expected file is missing.
    fn read_prediction(&self, out_dir: &Path, case: &str) -> Result<Option<LabelMap>> {
        match self.config.segmenter.output_mode {
            OutputMode::Labels => {
                let p = out_dir.join(nii(case));
                if !p.is_file() {
                    return Ok(None);
                }
                Ok(Some(read_labels(&p)?))
            }
            OutputMode::Probabilities => {
                let variants: Vec<(FlipSpec, String)> = if self.tta_active() {
                    enumerate_flips()
                        .into_iter()
                        .map(|f| (f, format!("{case}__flip{}", f.index())))
                        .collect()
                } else {
                    vec![(FlipSpec::IDENTITY, case.to_string())]
                };
                let mut entries = Vec::with_capacity(variants.len());
                for (flip, name) in variants {
                    match read_probs(out_dir, &name)? {
                        Some(p) => entries.push((flip, p)),
                        None => return Ok(None),
                    }
                }
                Ok(Some(argmax_labels(&aggregate(&entries)?)?))
            }
        }
    }

    /// Runs one round of `phase`: train, predict, clean, fuse, record.
    pub fn run_phase(&self, state: &mut PipelineState, phase: Phase) -> Result<()> {
        if state.phase != phase || !matches!(phase, Phase::Tumor | Phase::Organ) {
            return Err(Error::PhaseMismatch {
                requested: phase.to_string(),
                actual: state.phase.to_string(),
            });
        }
        let teachers: Vec<&CaseRecord> = self.manifest.cases.iter().filter(|c| is_teacher(c, phase)).collect();
        if teachers.is_empty() {
            return Err(Error::EmptyTeacherSet(phase.to_string()));
        }
        self.config.segmenter.validate()?;
        self.prepare(state)?;
        let round = state.round + 1;
        let rd = self.work.round_dir(phase, round);
        let contract = &self.config.segmenter;
        info!("{phase} phase, round {round}");

        if !state.progress.trained {
            let (img_dir, lab_dir, model_dir) = (rd.join("train/images"), rd.join("train/labels"), rd.join("model"));
            reset_dir(&img_dir)?;
            reset_dir(&lab_dir)?;
            reset_dir(&model_dir)?;
            let previous = state.history.iter().rev().find(|s| s.phase == phase && s.round + 1 == round);
            let mut n = 0;
            for case in &self.manifest.cases {
                let id = &case.case_id;
                let label = if is_teacher(case, phase) {
                    self.partial_gt(case, phase.classes())?.map().clone()
                } else if previous.is_some_and(|s| s.fused.contains(id)) {
                    read_labels(&self.work.fused(phase, round - 1, id))?
                } else {
                    continue;
                };
                link_or_copy(&self.work.image(id), &img_dir.join(nii(id)))?;
                write_labels(&label, &lab_dir.join(nii(id)))?;
                n += 1;
            }
            info!("training on {n} cases");
            contract.train(&img_dir, &lab_dir, &model_dir, &rd.join("logs/train.log"))?;
            state.progress.trained = true;
            self.save(state)?;
        }

        let targets: Vec<&CaseRecord> = self.manifest.cases.iter().filter(|c| !is_teacher(c, phase)).collect();
        if !state.progress.predicted {
            let inputs: Vec<(String, PathBuf)> = targets
                .iter()
                .map(|c| (c.case_id.clone(), self.work.image(&c.case_id)))
                .collect();
            let log = rd.join("logs/predict.log");
            let model = rd.join("model");
            self.write_inputs(&rd.join("predict/input"), &inputs)?;
            reset_dir(&rd.join("predict/output"))?;
            contract.predict(&model, &rd.join("predict/input"), &rd.join("predict/output"), &log)?;
            if let Some(e) = &self.eval {
                let inputs: Vec<(String, PathBuf)> = e
                    .cases
                    .iter()
                    .map(|c| (c.case_id.clone(), self.work.eval_image(&c.case_id)))
                    .collect();
                self.write_inputs(&rd.join("eval/input"), &inputs)?;
                reset_dir(&rd.join("eval/output"))?;
                contract.predict(&model, &rd.join("eval/input"), &rd.join("eval/output"), &log)?;
            }
            state.progress.predicted = true;
            self.save(state)?;
        }

        let shared = Mutex::new(std::mem::replace(state, PipelineState::new(phase)));
        let out_dir = rd.join("predict/output");
        let result = self.pool()?.install(|| {
            targets
                .par_iter()
                .try_for_each(|case| self.label_case(&shared, phase, round, case, &out_dir))
        });
        *state = shared.into_inner().expect("no worker panicked");
        result?;

        self.finish_round(state, phase, round, &targets)
    }

    fn label_case(
        &self,
        shared: &Mutex<PipelineState>,
        phase: Phase,
        round: u32,
        case: &CaseRecord,
        out_dir: &Path,
    ) -> Result<()> {
        let id = &case.case_id;
        let status = shared.lock().expect("state lock").cases.get(id).map(|c| c.status);
        let pseudo_path = self.work.pseudo(phase, round, id);
        let pseudo = match status {
            Some(CaseStatus::Fused) | Some(CaseStatus::Failed) => return Ok(()),
            Some(CaseStatus::PseudoLabeled) => read_labels(&pseudo_path)?,
            Some(CaseStatus::Pending) | None => {
                let gt_grid = read_header(self.work.image(id))?;
                let pred = match self.read_prediction(out_dir, id)? {
                    Some(p) if p.dims() == gt_grid.dims => p,
                    found => {
                        let why = if found.is_some() {
                            "segmenter output has the wrong grid size"
                        } else {
                            "segmenter output missing"
                        };
                        warn!("case {id}: {why}");
                        let mut s = shared.lock().expect("state lock");
                        let cs = s.case_mut(id);
                        cs.status = CaseStatus::Failed;
                        cs.error = Some(why.to_string());
                        return self.save(&mut s);
                    }
                };
                let pseudo = self.clean(&pred, phase);
                let digest = write_labels(&pseudo, &pseudo_path)?;
                let mut s = shared.lock().expect("state lock");
                let cs = s.case_mut(id);
                cs.status = CaseStatus::PseudoLabeled;
                cs.pseudo_digest = Some(digest);
                self.save(&mut s)?;
                pseudo
            }
        };
        let gt = self.partial_gt(case, phase.classes())?;
        let fused = merge_partial(&gt, &pseudo, &self.config.fusion)?;
        let digest = write_labels(&fused, &self.work.fused(phase, round, id))?;
        let mut s = shared.lock().expect("state lock");
        let cs = s.case_mut(id);
        cs.status = CaseStatus::Fused;
        cs.fused_digest = Some(digest);
        self.save(&mut s)
    }

    fn finish_round(&self, state: &mut PipelineState, phase: Phase, round: u32, targets: &[&CaseRecord]) -> Result<()> {
        let status = |id: &str| state.cases.get(id).map(|c| c.status);
        let fused: Vec<String> = targets
            .iter()
            .filter(|c| status(&c.case_id) == Some(CaseStatus::Fused))
            .map(|c| c.case_id.clone())
            .collect();
        let failed: Vec<String> = targets
            .iter()
            .filter(|c| status(&c.case_id) != Some(CaseStatus::Fused))
            .map(|c| c.case_id.clone())
            .collect();

        let (mut labeled, mut total) = (0u64, 0u64);
        for case in &self.manifest.cases {
            let map = if fused.contains(&case.case_id) {
                read_labels(&self.work.fused(phase, round, &case.case_id))?
            } else {
                self.track_label(state, phase, case)?
            };
            labeled += map.count_nonzero() as u64;
            total += map.len() as u64;
        }

        let changed_fraction = match state.history.iter().rev().find(|s| s.phase == phase && s.round + 1 == round) {
            Some(prev) => {
                let (mut changed, mut voxels) = (0u64, 0u64);
                for id in fused.iter().filter(|id| prev.fused.contains(id)) {
                    let a = read_labels(&self.work.fused(phase, round - 1, id))?;
                    let b = read_labels(&self.work.fused(phase, round, id))?;
                    changed += a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count() as u64;
                    voxels += a.len() as u64;
                }
                (voxels > 0).then(|| changed as f64 / voxels as f64)
            }
            None => None,
        };

        let (heldout_mean_dsc, heldout) = match self.evaluate_round(phase, round)? {
            Some((m, c)) => (Some(m), Some(c)),
            None => (None, None),
        };
        if let Some(m) = heldout_mean_dsc {
            info!("{phase} round {round}: held-out mean DSC {m:.4}");
        }
        let summary = RoundSummary {
            phase,
            round,
            fused,
            failed,
            labeled_voxels: labeled,
            total_voxels: total,
            changed_fraction,
            heldout_mean_dsc,
            heldout,
        };
        state.converged = matches!(
            (self.config.stop_epsilon, summary.changed_fraction),
            (Some(eps), Some(f)) if f < eps
        );
        state.history.push(summary);
        state.round = round;
        state.start_round();
        self.save(state)
    }

    /// Scores held-out predictions of this round against ground truth
    /// restricted to the phase's classes; writes CSV and JSON reports.
    fn evaluate_round(&self, phase: Phase, round: u32) -> Result<Option<(f64, CohortSummary)>> {
        let Some(eval) = &self.eval else {
            return Ok(None);
        };
        let out_dir = self.work.round_dir(phase, round).join("eval/output");
        let classes = phase.classes();
        let reports = self.pool()?.install(|| {
            eval.cases
                .par_iter()
                .map(|case| {
                    let id = &case.case_id;
                    let gt = restrict(&read_labels(&self.work.eval_gt(id))?, classes);
                    let pred = match self.read_prediction(&out_dir, id)? {
                        Some(p) => self.clean(&p, phase),
                        None => {
                            warn!("held-out case {id}: segmenter output missing, scored as empty");
                            LabelMap::background(gt.dims(), gt.spacing())
                        }
                    };
                    evaluate_case(id, &pred, &gt, &self.config.nsd)
                })
                .collect::<Result<Vec<MetricReport>>>()
        })?;
        let cohort = aggregate_cohort(&reports)?;
        let per_case: Vec<f64> = reports
            .iter()
            .filter_map(|r| {
                let scores: Vec<f64> = r
                    .per_class
                    .iter()
                    .filter(|(&c, s)| classes.contains(c) && (s.gt_present || s.pred_present))
                    .map(|(_, s)| s.dsc)
                    .collect();
                (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64)
            })
            .collect();
        let mean = if per_case.is_empty() {
            1.0
        } else {
            per_case.iter().sum::<f64>() / per_case.len() as f64
        };
        for (ext, text) in [("csv", cohort.to_csv()), ("json", cohort.to_json())] {
            let path = self.work.report(phase, round, ext);
            ensure_parent(&path)?;
            write_atomic(&path, text.as_bytes())?;
        }
        Ok(Some((mean, cohort)))
    }

    /// Moves the state to the next phase once the current one has run its
    /// configured rounds or converged.
    fn advance_if_done(&self, state: &mut PipelineState) -> Result<bool> {
        let phase = state.phase;
        if !matches!(phase, Phase::Tumor | Phase::Organ) {
            return Ok(false);
        }
        if state.round < self.config.rounds(phase) && !state.converged {
            return Ok(false);
        }
        state.phase = self.next_phase(phase);
        state.round = 0;
        state.converged = false;
        state.start_round();
        self.save(state)?;
        Ok(true)
    }

    /// Combines both tracks (and external sources) into the final label of
    /// every case.
    pub fn merge(&self, state: &mut PipelineState) -> Result<()> {
        if state.phase != Phase::Merge {
            return Err(Error::PhaseMismatch {
                requested: Phase::Merge.to_string(),
                actual: state.phase.to_string(),
            });
        }
        self.prepare(state)?;
        let target = self.target_spacing(state)?;
        let frozen = state.clone();
        let shared = Mutex::new(std::mem::replace(state, PipelineState::new(Phase::Merge)));
        let result = self.pool()?.install(|| {
            self.manifest.cases.par_iter().try_for_each(|case| {
                let done = shared
                    .lock()
                    .expect("state lock")
                    .final_digests
                    .contains_key(&case.case_id);
                if done {
                    return Ok(());
                }
                let map = self.merge_case(&frozen, case, target)?;
                let digest = write_labels(&map, &self.work.final_label(&case.case_id))?;
                let mut s = shared.lock().expect("state lock");
                s.final_digests.insert(case.case_id.clone(), digest);
                self.save(&mut s)
            })
        });
        *state = shared.into_inner().expect("no worker panicked");
        result?;
        state.phase = Phase::Done;
        self.save(state)
    }

    fn merge_case(&self, state: &PipelineState, case: &CaseRecord, target: Spacing) -> Result<LabelMap> {
        let organ = self.track_label(state, Phase::Organ, case)?;
        let tumor = self.track_label(state, Phase::Tumor, case)?;
        let mut merged = merge_organ_tumor(&organ, &tumor, self.config.fusion.tumor_overrides_organ)?;
        if !self.config.external_sources.is_empty() {
            let mut external = Vec::new();
            for src in &self.config.external_sources {
                let dir = self.config.resolve(&src.dir);
                let Some(path) = [".nii.gz", ".nii"]
                    .iter()
                    .map(|ext| dir.join(format!("{}{ext}", case.case_id)))
                    .find(|p| p.is_file())
                else {
                    continue;
                };
                let mut map = read_labels(&path)?;
                if !map.spacing().approx_eq(&target, 1e-6) {
                    map = resample_labels(&map, &ResampleSpec::new(target))?;
                }
                external.push((src.id.as_str(), map));
            }
            let mut sources: Vec<(&str, &LabelMap)> = vec![(OWN_SOURCE, &merged)];
            sources.extend(external.iter().map(|(id, m)| (*id, m)));
            merged = majority_vote(&sources, &self.config.vote_policy())?;
        }
        let gt = self.partial_gt(case, ClassSet::ALL)?;
        merge_partial(&gt, &merged, &self.config.fusion)
    }

    /// Runs all remaining work: phases in order, then the merge.
    pub fn run(&self) -> Result<FinalReport> {
        let mut state = self.load_state()?;
        self.prepare(&mut state)?;
        loop {
            match state.phase {
                p @ (Phase::Tumor | Phase::Organ) => {
                    if !self.advance_if_done(&mut state)? {
                        self.run_phase(&mut state, p)?;
                    }
                }
                Phase::Merge => self.merge(&mut state)?,
                Phase::Done => break,
            }
        }
        let report = self.final_report(&state)?;
        let path = self.work.root().join("report.json");
        write_atomic(&path, serde_json::to_string_pretty(&report).expect("report serializes").as_bytes())?;
        Ok(report)
    }

    pub fn final_report(&self, state: &PipelineState) -> Result<FinalReport> {
        let cases = self
            .manifest
            .cases
            .iter()
            .map(|c| {
                let path = self.work.final_label(&c.case_id);
                let map = read_labels(&path)?;
                let h = map.histogram();
                Ok(FinalCase {
                    case_id: c.case_id.clone(),
                    digest: state.final_digests.get(&c.case_id).cloned().unwrap_or_default(),
                    classes_present: (1..h.len() as u8).filter(|&k| h[k as usize] > 0).collect(),
                    path,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FinalReport {
            target_spacing: self.target_spacing(state)?,
            cases,
            history: state.history.clone(),
        })
    }
}

/// Reads `<name>_prob_<k>` maps for k in 0..=14. Channel 0 is required;
/// absent classes are zero.
fn read_probs(dir: &Path, name: &str) -> Result<Option<ProbMap<f64>>> {
    let mut channels: Vec<Option<Volume<f64>>> = Vec::new();
    for k in 0..crate::classes::NUM_CLASSES {
        let p = dir.join(format!("{name}_prob_{k}.nii.gz"));
        channels.push(if p.is_file() {
            Some(load_nifti(&p)?.to_real::<f64>())
        } else {
            None
        });
    }
    let Some(template) = channels[0].clone() else {
        return Ok(None);
    };
    let zeros = template.map(|_| 0.0);
    let last = channels.iter().rposition(Option::is_some).unwrap_or(0);
    let channels = channels
        .into_iter()
        .take(last + 1)
        .map(|c| c.unwrap_or_else(|| zeros.clone()))
        .collect();
    ProbMap::new(channels).map(Some)
}

/// Convenience wrapper: load the state, run to completion, report.
pub fn run_pipeline(manifest: Manifest, config: PipelineConfig, state_path: &Path) -> Result<FinalReport> {
    Pipeline::new(manifest, config, state_path)?.run()
}
