//! Deterministic intensity-band segmenter standing in for a trained network.
//!
//! Training records, per class, the mean and standard deviation of the
//! labeled voxel intensities and the number of cases containing the class.
//! Prediction accepts voxels within a band of half-width
//! `K_SIGMA * std * n / (n + PRIOR_CASES)` around the class mean, so the band
//! widens toward `K_SIGMA * std` as more cases are seen.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::segmenter::OutputMode;
use crate::classes::BACKGROUND;
use crate::error::{Error, Result};
use crate::nifti::{list_dir, load_nifti, save_nifti, stem};
use crate::volume::{LabelMap, Volume};

pub const K_SIGMA: f64 = 2.5;
pub const PRIOR_CASES: f64 = 0.5;
pub const MODEL_FILE: &str = "model.json";
const MIN_STD: f64 = 1e-3;
const PROB_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassBand {
    pub class: u8,
    pub mean: f64,
    pub std: f64,
    pub n_cases: usize,
}

impl ClassBand {
    pub fn half_width(&self) -> f64 {
        let n = self.n_cases as f64;
        K_SIGMA * self.std.max(MIN_STD) * n / (n + PRIOR_CASES)
    }

    /// Soft membership in (0, 1); above 0.5 exactly inside the band.
    fn score(&self, x: f64) -> f64 {
        let h = self.half_width();
        let t = h / 4.0;
        let s = 1.0 / (1.0 + (-(h - (x - self.mean).abs()) / t).exp());
        s.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockModel {
    pub n_train: usize,
    pub classes: Vec<ClassBand>,
}

impl MockModel {
    pub fn load(model_dir: &Path) -> Result<Self> {
        let path = model_dir.join(MODEL_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }

    /// Per-voxel class probabilities: background first, then each known
    /// class in ascending id order.
    pub fn probabilities(&self, x: f64) -> Vec<f64> {
        let scores: Vec<f64> = self.classes.iter().map(|b| b.score(x)).collect();
        let fg = scores.iter().copied().fold(0.0, f64::max);
        let bg = (1.0 - fg).max(PROB_FLOOR);
        let total = bg + scores.iter().sum::<f64>();
        std::iter::once(bg).chain(scores).map(|s| s / total).collect()
    }

    pub fn label(&self, x: f64) -> u8 {
        let p = self.probabilities(x);
        let mut best = 0;
        for i in 1..p.len() {
            if p[i] > p[best] {
                best = i;
            }
        }
        if best == 0 {
            BACKGROUND
        } else {
            self.classes[best - 1].class
        }
    }
}

/// Estimates class bands from `<case>` images in `train_dir` and labels of
/// the same name in `label_dir`, and writes the model to `model_dir`.
pub fn train(train_dir: &Path, label_dir: &Path, model_dir: &Path) -> Result<MockModel> {
    // per class: (sum, sum of squares, voxels, cases)
    let mut acc = [(0.0f64, 0.0f64, 0usize, 0usize); crate::classes::NUM_CLASSES];
    let images = list_dir(train_dir)?;
    if images.is_empty() {
        return Err(Error::EmptyInput("no training images"));
    }
    for img_path in &images {
        let name = stem(img_path).expect("listed files have a stem");
        let label_path = find_nifti(label_dir, name).ok_or_else(|| Error::MissingFile {
            case: name.to_string(),
            path: label_dir.join(format!("{name}.nii.gz")),
        })?;
        let img = load_nifti(img_path)?.to_real::<f64>();
        let labels = load_nifti(&label_path)?.into_labels()?;
        img.check_same_dims(&labels)?;
        let mut seen = [false; crate::classes::NUM_CLASSES];
        for (&x, &c) in img.data().iter().zip(labels.data()) {
            if c == BACKGROUND {
                continue;
            }
            let a = &mut acc[c as usize];
            a.0 += x;
            a.1 += x * x;
            a.2 += 1;
            seen[c as usize] = true;
        }
        for (a, s) in acc.iter_mut().zip(seen) {
            a.3 += usize::from(s);
        }
    }
    let classes = acc
        .iter()
        .enumerate()
        .filter(|(_, a)| a.2 > 0)
        .map(|(c, &(sum, sq, n, cases))| {
            let mean = sum / n as f64;
            let var = (sq / n as f64 - mean * mean).max(0.0);
            ClassBand {
                class: c as u8,
                mean,
                std: var.sqrt(),
                n_cases: cases,
            }
        })
        .collect();
    let model = MockModel {
        n_train: images.len(),
        classes,
    };
    fs::create_dir_all(model_dir).map_err(|e| Error::io(model_dir, e))?;
    let path = model_dir.join(MODEL_FILE);
    let text = serde_json::to_string_pretty(&model).expect("model serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(model)
}

/// Segments every image in `input_dir`, writing `<name>.nii.gz` labels or
/// `<name>_prob_<class>.nii.gz` maps to `output_dir`. Returns the number of
/// images processed.
pub fn predict(model_dir: &Path, input_dir: &Path, output_dir: &Path, mode: OutputMode) -> Result<usize> {
    let model = MockModel::load(model_dir)?;
    fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let inputs = list_dir(input_dir)?;
    for path in &inputs {
        let name = stem(path).expect("listed files have a stem");
        let img = load_nifti(path)?.to_real::<f64>();
        match mode {
            OutputMode::Labels => {
                let labels = LabelMap::new(img.map(|x| model.label(x)))?;
                save_nifti(labels.as_volume(), output_dir.join(format!("{name}.nii.gz")), true)?;
            }
            OutputMode::Probabilities => {
                let probs: Vec<Vec<f64>> = img.data().iter().map(|&x| model.probabilities(x)).collect();
                let ids = std::iter::once(BACKGROUND).chain(model.classes.iter().map(|b| b.class));
                for (k, class) in ids.enumerate() {
                    let data: Vec<f32> = probs.iter().map(|p| p[k] as f32).collect();
                    let channel: Volume<f32> = img.with_data(data)?;
                    save_nifti(&channel, output_dir.join(format!("{name}_prob_{class}.nii.gz")), true)?;
                }
            }
        }
    }
    Ok(inputs.len())
}

fn find_nifti(dir: &Path, name: &str) -> Option<std::path::PathBuf> {
    [".nii.gz", ".nii"]
        .iter()
        .map(|ext| dir.join(format!("{name}{ext}")))
        .find(|p| p.is_file())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn band(mean: f64, std: f64, n: usize) -> ClassBand {
        ClassBand {
            class: 14,
            mean,
            std,
            n_cases: n,
        }
    }

    #[test]
    fn band_widens_with_cases() {
        let widths: Vec<f64> = (1..6).map(|n| band(0.0, 1.0, n).half_width()).collect();
        assert!(widths.windows(2).all(|w| w[1] > w[0]));
        assert!(widths[4] < K_SIGMA);
    }

    #[test]
    fn labels_follow_band() {
        let m = MockModel {
            n_train: 1,
            classes: vec![band(10.0, 1.0, 1)],
        };
        let h = m.classes[0].half_width();
        assert_eq!(m.label(10.0), 14);
        assert_eq!(m.label(10.0 + 0.99 * h), 14);
        assert_eq!(m.label(10.0 + 1.01 * h), 0);
        assert_eq!(m.label(-50.0), 0);
        let p = m.probabilities(10.3);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn predict_without_model_fails() {
        let dir = tempfile::tempdir().unwrap();
        let err = predict(dir.path(), dir.path(), &dir.path().join("out"), OutputMode::Labels);
        assert!(matches!(err, Err(Error::Io { .. })));
    }
}
