//! Dataset manifest: which cases exist and what each one annotates.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::classes::{ClassSet, TUMOR};
use crate::error::{Error, Result};
use crate::nifti::read_header;
use crate::preprocess::median_spacing;
use crate::volume::Spacing;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationStatus {
    Full,
    TumorOnly,
    OrganOnly,
    Unlabeled,
}

impl AnnotationStatus {
    /// Classes implied by the status when a record does not list them.
    fn default_classes(self) -> Option<ClassSet> {
        match self {
            AnnotationStatus::Full => Some(ClassSet::ALL),
            AnnotationStatus::TumorOnly => Some(ClassSet::TUMOR),
            AnnotationStatus::Unlabeled => Some(ClassSet::EMPTY),
            AnnotationStatus::OrganOnly => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: String,
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_path: Option<PathBuf>,
    pub annotation_status: AnnotationStatus,
    /// Defaults from the status; required for `organ_only`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotated_classes: Option<ClassSet>,
}

impl CaseRecord {
    pub fn annotated(&self) -> ClassSet {
        self.annotated_classes
            .or(self.annotation_status.default_classes())
            .unwrap_or(ClassSet::EMPTY)
    }

    fn check(&self) -> Result<()> {
        let bad = |detail: String| Error::InconsistentCase {
            case: self.case_id.clone(),
            detail,
        };
        let status = self.annotation_status;
        let classes = match (self.annotated_classes, status.default_classes()) {
            (Some(c), Some(expected)) if c != expected => {
                return Err(bad(format!(
                    "status {status:?} implies classes {expected:?}, record lists {c:?}"
                )))
            }
            (Some(c), _) => c,
            (None, Some(expected)) => expected,
            (None, None) => return Err(bad("organ_only record must list annotated_classes".into())),
        };
        if status == AnnotationStatus::OrganOnly && (classes.is_empty() || classes.contains(TUMOR)) {
            return Err(bad(format!("organ_only record lists {classes:?}")));
        }
        match (&self.label_path, status) {
            (Some(_), AnnotationStatus::Unlabeled) => Err(bad("unlabeled record has a label_path".into())),
            (None, s) if s != AnnotationStatus::Unlabeled => Err(bad(format!("{s:?} record has no label_path"))),
            _ => Ok(()),
        }
    }
}

/// Case counts by status: (full, tumor_only, organ_only, unlabeled).
pub type StatusCounts = (usize, usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub cases: Vec<CaseRecord>,
    /// Directory that relative paths are resolved against.
    pub root: PathBuf,
}

impl Manifest {
    /// Validates ids, status consistency and file existence.
    pub fn new(cases: Vec<CaseRecord>, root: PathBuf) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for c in &cases {
            if !seen.insert(c.case_id.as_str()) {
                return Err(Error::DuplicateCase(c.case_id.clone()));
            }
            c.check()?;
        }
        let m = Manifest { cases, root };
        for c in &m.cases {
            let paths = std::iter::once(m.image_path(c)).chain(m.label_path(c));
            for p in paths {
                if !p.is_file() {
                    return Err(Error::MissingFile {
                        case: c.case_id.clone(),
                        path: p,
                    });
                }
            }
        }
        Ok(m)
    }

    pub fn image_path(&self, case: &CaseRecord) -> PathBuf {
        self.root.join(&case.image_path)
    }

    pub fn label_path(&self, case: &CaseRecord) -> Option<PathBuf> {
        case.label_path.as_ref().map(|p| self.root.join(p))
    }

    pub fn get(&self, case_id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.case_id == case_id)
    }

    pub fn counts(&self) -> StatusCounts {
        let n = |s| self.cases.iter().filter(|c| c.annotation_status == s).count();
        (
            n(AnnotationStatus::Full),
            n(AnnotationStatus::TumorOnly),
            n(AnnotationStatus::OrganOnly),
            n(AnnotationStatus::Unlabeled),
        )
    }

    /// Per-axis median voxel spacing over all images, from headers only.
    pub fn median_spacing(&self) -> Result<Spacing> {
        let spacings = self
            .cases
            .iter()
            .map(|c| Ok(read_header(self.image_path(c))?.spacing))
            .collect::<Result<Vec<_>>>()?;
        median_spacing(&spacings)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.cases).expect("records serialize")
    }
}

/// Reads a manifest file: a JSON array of case records with paths relative
/// to the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cases: Vec<CaseRecord> = serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let m = Manifest::new(cases, root)?;
    let (full, tumor, organ, unlabeled) = m.counts();
    info!(
        "manifest {}: {} cases ({full} full, {tumor} tumor-only, {organ} organ-only, {unlabeled} unlabeled)",
        path.display(),
        m.cases.len()
    );
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, status: AnnotationStatus, label: bool) -> CaseRecord {
        CaseRecord {
            case_id: id.into(),
            image_path: format!("{id}.nii").into(),
            label_path: label.then(|| format!("{id}_seg.nii").into()),
            annotation_status: status,
            annotated_classes: None,
        }
    }

    #[test]
    fn default_classes_follow_status() {
        assert_eq!(record("a", AnnotationStatus::Full, true).annotated(), ClassSet::ALL);
        assert_eq!(record("a", AnnotationStatus::TumorOnly, true).annotated(), ClassSet::TUMOR);
        assert!(record("a", AnnotationStatus::Unlabeled, false).annotated().is_empty());
    }

    #[test]
    fn consistency_checks() {
        let mut r = record("a", AnnotationStatus::TumorOnly, true);
        r.annotated_classes = Some(ClassSet::from_classes([1, 14]).unwrap());
        assert!(matches!(r.check(), Err(Error::InconsistentCase { .. })));

        assert!(record("b", AnnotationStatus::OrganOnly, true).check().is_err());
        let mut o = record("b", AnnotationStatus::OrganOnly, true);
        o.annotated_classes = Some(ClassSet::from_classes([1, 3]).unwrap());
        assert!(o.check().is_ok());
        o.annotated_classes = Some(ClassSet::from_classes([1, 14]).unwrap());
        assert!(o.check().is_err());

        assert!(record("c", AnnotationStatus::Unlabeled, true).check().is_err());
        assert!(record("c", AnnotationStatus::Full, false).check().is_err());
    }

    #[test]
    fn duplicate_ids_rejected_before_file_checks() {
        let cases = vec![
            record("x", AnnotationStatus::Unlabeled, false),
            record("x", AnnotationStatus::Unlabeled, false),
        ];
        match Manifest::new(cases, PathBuf::from("/nonexistent")) {
            Err(Error::DuplicateCase(id)) => assert_eq!(id, "x"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_named() {
        let cases = vec![record("y", AnnotationStatus::Unlabeled, false)];
        assert!(matches!(
            Manifest::new(cases, PathBuf::from("/nonexistent")),
            Err(Error::MissingFile { .. })
        ));
    }
}
