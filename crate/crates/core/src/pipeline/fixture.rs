//! Synthetic desk-scale dataset for exercising the pipeline end to end.
//!
//! Six training cases (one full, two tumor-only, one organ-only, two
//! unlabeled) and two fully annotated held-out cases. Each volume holds a
//! liver with a bright lesion, a kidney, the spleen and the aorta as
//! ellipsoids with distinct intensity bands plus Gaussian noise.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use super::manifest::{AnnotationStatus, CaseRecord};
use crate::classes::{ClassSet, TUMOR};
use crate::error::{Error, Result};
use crate::nifti::save_nifti;
use crate::volume::{Dims, LabelMap, Spacing, Volume};

pub const FIXTURE_DIMS: [usize; 3] = [24, 24, 12];
pub const FIXTURE_SPACING: [f64; 3] = [1.5, 1.5, 3.0];
pub const NOISE_HU: f64 = 6.0;
const BACKGROUND_HU: f64 = -60.0;

/// Class id and mean intensity in HU.
const BANDS: [(u8, f64); 5] = [(1, 60.0), (2, 160.0), (3, 110.0), (5, 210.0), (TUMOR, 260.0)];

pub struct FixturePaths {
    pub manifest: PathBuf,
    pub eval_manifest: PathBuf,
    pub config: PathBuf,
}

struct Ellipsoid {
    class: u8,
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        let p = [x as f64, y as f64, z as f64];
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum::<f64>()
            <= 1.0
    }
}

fn jitter(rng: &mut ChaCha8Rng, v: [f64; 3], amount: f64) -> [f64; 3] {
    v.map(|c| c + rng.random_range(-amount..=amount))
}

/// One synthetic case: image in HU and its full label map. Shapes are
/// painted in order, later ones on top, so the lesion sits inside the liver.
pub fn synth_case(rng: &mut ChaCha8Rng) -> (Volume<i16>, LabelMap) {
    let dims = Dims(FIXTURE_DIMS);
    let spacing = Spacing::try_from(FIXTURE_SPACING).expect("valid spacing");
    let liver_center = jitter(rng, [8.0, 12.0, 6.0], 1.0);
    let shapes = [
        Ellipsoid {
            class: 1,
            center: liver_center,
            radii: jitter(rng, [5.5, 7.0, 4.0], 0.5),
        },
        Ellipsoid {
            class: 2,
            center: jitter(rng, [17.0, 5.5, 6.0], 0.7),
            radii: jitter(rng, [2.5, 3.0, 3.0], 0.3),
        },
        Ellipsoid {
            class: 3,
            center: jitter(rng, [18.0, 17.0, 6.0], 0.7),
            radii: jitter(rng, [3.0, 3.5, 3.0], 0.3),
        },
        Ellipsoid {
            class: 5,
            center: [rng.random_range(12.5..13.5), rng.random_range(11.5..12.5), 6.0],
            radii: [1.6, 1.6, 20.0],
        },
        Ellipsoid {
            class: TUMOR,
            center: jitter(rng, liver_center, 1.5),
            radii: [2.2, 2.2, 1.4],
        },
    ];
    let labels = Volume::from_fn(dims, spacing, |x, y, z| {
        shapes
            .iter()
            .rev()
            .find(|s| s.contains(x, y, z))
            .map_or(0, |s| s.class)
    });
    let noise = Normal::new(0.0, NOISE_HU).expect("valid sigma");
    let image = labels.map(|c| {
        let base = BANDS.iter().find(|b| b.0 == c).map_or(BACKGROUND_HU, |b| b.1);
        (base + noise.sample(rng)).round() as i16
    });
    (image, LabelMap::new(labels).expect("class ids in range"))
}

/// Keeps only `annotated` classes; everything else becomes background.
fn partial(labels: &LabelMap, annotated: ClassSet) -> LabelMap {
    let data = labels
        .data()
        .iter()
        .map(|&v| if annotated.contains(v) { v } else { 0 })
        .collect();
    labels.with_labels(data).expect("values subset")
}

/// Writes the fixture under `dir`. The generated config runs `exe` as the
/// segmenter through its `mock-segmenter` subcommand.
pub fn write_fixture(dir: &Path, exe: &Path, seed: u64) -> Result<FixturePaths> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for sub in ["images", "labels", "eval/images", "eval/labels"] {
        let d = dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let organ_only = ClassSet::from_classes([1, 3])?;
    let training = [
        ("c00", AnnotationStatus::Full, None),
        ("c01", AnnotationStatus::TumorOnly, None),
        ("c02", AnnotationStatus::TumorOnly, None),
        ("c03", AnnotationStatus::OrganOnly, Some(organ_only)),
        ("c04", AnnotationStatus::Unlabeled, None),
        ("c05", AnnotationStatus::Unlabeled, None),
    ];
    let mut records = Vec::new();
    for (id, status, classes) in training {
        let (image, labels) = synth_case(&mut rng);
        let image_path = PathBuf::from(format!("images/{id}.nii.gz"));
        save_nifti(&image, dir.join(&image_path), true)?;
        let mut record = CaseRecord {
            case_id: id.to_string(),
            image_path,
            label_path: None,
            annotation_status: status,
            annotated_classes: classes,
        };
        if status != AnnotationStatus::Unlabeled {
            let label_path = PathBuf::from(format!("labels/{id}.nii.gz"));
            save_nifti(partial(&labels, record.annotated()).as_volume(), dir.join(&label_path), true)?;
            record.label_path = Some(label_path);
        }
        records.push(record);
    }
    let mut eval_records = Vec::new();
    for id in ["e00", "e01"] {
        let (image, labels) = synth_case(&mut rng);
        let image_path = PathBuf::from(format!("eval/images/{id}.nii.gz"));
        let label_path = PathBuf::from(format!("eval/labels/{id}.nii.gz"));
        save_nifti(&image, dir.join(&image_path), true)?;
        save_nifti(labels.as_volume(), dir.join(&label_path), true)?;
        eval_records.push(CaseRecord {
            case_id: id.to_string(),
            image_path,
            label_path: Some(label_path),
            annotation_status: AnnotationStatus::Full,
            annotated_classes: None,
        });
    }

    let paths = FixturePaths {
        manifest: dir.join("manifest.json"),
        eval_manifest: dir.join("eval_manifest.json"),
        config: dir.join("config.json"),
    };
    write_json(&paths.manifest, &serde_json::to_value(&records).expect("records serialize"))?;
    write_json(&paths.eval_manifest, &serde_json::to_value(&eval_records).expect("records serialize"))?;
    let exe = exe.display().to_string();
    let config = json!({
        "segmenter": {
            "train_cmd": [exe, "mock-segmenter", "train",
                "--train-dir", "{train_dir}", "--label-dir", "{label_dir}", "--model-dir", "{model_dir}"],
            "predict_cmd": [exe, "mock-segmenter", "predict",
                "--model-dir", "{model_dir}", "--input-dir", "{input_dir}", "--output-dir", "{output_dir}"],
            "output_mode": "probabilities"
        },
        "eval_manifest": "eval_manifest.json",
        "rounds_tumor": 2,
        "rounds_organ": 2,
        "workers": 2
    });
    write_json(&paths.config, &config)?;
    Ok(paths)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("JSON value serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_case_has_every_class() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (image, labels) = synth_case(&mut rng);
        let h = labels.histogram();
        for (class, _) in BANDS {
            assert!(h[class as usize] > 0, "class {class} missing");
        }
        assert_eq!(image.dims(), labels.dims());
    }

    #[test]
    fn same_seed_same_case() {
        let a = synth_case(&mut ChaCha8Rng::seed_from_u64(9));
        let b = synth_case(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }
}
