mod common;

use std::fs;
use std::path::Path;

use common::*;
use iterseg::nifti::save_nifti;
use iterseg::pipeline::runner::read_labels;
use iterseg::tta::{apply_flip, enumerate_flips};
use iterseg::{Dims, LabelMap, Spacing, Volume};

fn stderr(out: &std::process::Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn save_labels(map: &LabelMap, path: &Path) {
    save_nifti(map.as_volume(), path, true).unwrap();
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn no_arguments_prints_usage() {
    let out = iterseg(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"));
}

#[test]
fn every_subcommand_has_help() {
    let commands: &[&[&str]] = &[
        &[],
        &["run"],
        &["phase"],
        &["fuse"],
        &["fuse", "vote"],
        &["fuse", "partial"],
        &["fuse", "organ-tumor"],
        &["evaluate"],
        &["preprocess"],
        &["tta"],
        &["postprocess"],
        &["monitor"],
        &["mock-segmenter", "train"],
        &["mock-segmenter", "predict"],
        &["make-fixture"],
    ];
    for c in commands {
        let mut args = c.to_vec();
        args.push("--help");
        let out = iterseg(&args);
        assert_eq!(out.status.code(), Some(0), "{c:?}");
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("--config") && text.contains("--state"), "{c:?} lacks global flags");
    }
}

#[test]
fn evaluate_identical_directories_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    let mut r = rng(5);
    for name in ["x", "y"] {
        let map = random_labels(&mut r, 6, &[0, 1, 3, 14]);
        save_labels(&map, &a.join(format!("{name}.nii.gz")));
        save_labels(&map, &b.join(format!("{name}.nii.gz")));
    }
    let csv = dir.path().join("r.csv");
    let out = iterseg(&["evaluate", "--pred", p(&a), "--gt", p(&b), "--out", p(&csv)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("class,dsc_mean,dsc_std,nsd_mean,nsd_std"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 15);
    for row in rows {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(&f[1..], ["1.000000", "0.000000", "1.000000", "0.000000"], "{row}");
    }
    assert!(csv.with_extension("json").is_file());
}

#[test]
fn fuse_reports_dimension_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let a = LabelMap::background(Dims::new(4, 4, 4).unwrap(), Spacing::unit());
    let b = LabelMap::background(Dims::new(4, 4, 5).unwrap(), Spacing::unit());
    let (pa, pb) = (dir.path().join("a.nii.gz"), dir.path().join("b.nii.gz"));
    save_labels(&a, &pa);
    save_labels(&b, &pb);
    let out_path = dir.path().join("o.nii.gz");
    let vote = iterseg(&["fuse", "vote", "--source", &format!("a={}", p(&pa)), "--source", &format!("b={}", p(&pb)), "--out", p(&out_path)]);
    assert_eq!(vote.status.code(), Some(1));
    assert!(stderr(&vote).contains("dimension mismatch"), "{}", stderr(&vote));
    let ot = iterseg(&["fuse", "organ-tumor", "--organ", p(&pa), "--tumor", p(&pb), "--out", p(&out_path)]);
    assert_eq!(ot.status.code(), Some(1));
    assert!(stderr(&ot).contains("dimension mismatch"));
    assert!(!out_path.exists());
}

#[test]
fn fuse_vote_and_overlay() {
    let dir = tempfile::tempdir().unwrap();
    let d = Dims::new(3, 1, 1).unwrap();
    let map = |v: Vec<u8>| LabelMap::from_vec(d, Spacing::unit(), v).unwrap();
    let paths: Vec<_> = [vec![1, 2, 0], vec![1, 3, 0], vec![2, 3, 14]]
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let path = dir.path().join(format!("s{i}.nii.gz"));
            save_labels(&map(v), &path);
            path
        })
        .collect();
    let out_path = dir.path().join("vote.nii.gz");
    let sources: Vec<String> = paths.iter().enumerate().map(|(i, q)| format!("s{i}={}", p(q))).collect();
    let mut args = vec!["fuse", "vote"];
    for s in &sources {
        args.extend(["--source", s.as_str()]);
    }
    args.extend(["--out", p(&out_path)]);
    assert!(iterseg(&args).status.success());
    assert_eq!(read_labels(&out_path).unwrap().data(), [1, 3, 0]);

    let organ = dir.path().join("organ.nii.gz");
    let tumor = dir.path().join("tumor.nii.gz");
    save_labels(&map(vec![1, 1, 0]), &organ);
    save_labels(&map(vec![14, 0, 14]), &tumor);
    let out = iterseg(&["fuse", "organ-tumor", "--organ", p(&organ), "--tumor", p(&tumor), "--out", p(&out_path)]);
    assert!(out.status.success());
    assert_eq!(read_labels(&out_path).unwrap().data(), [14, 1, 14]);
}

#[test]
fn postprocess_keeps_largest_component() {
    let dir = tempfile::tempdir().unwrap();
    let d = Dims::new(7, 1, 1).unwrap();
    let input = dir.path().join("in.nii.gz");
    let output = dir.path().join("out.nii.gz");
    save_labels(&LabelMap::from_vec(d, Spacing::unit(), vec![1, 1, 1, 0, 1, 0, 14]).unwrap(), &input);
    assert!(iterseg(&["postprocess", "--input", p(&input), "--output", p(&output)]).status.success());
    assert_eq!(read_labels(&output).unwrap().data(), [1, 1, 1, 0, 0, 0, 14]);
}

#[test]
fn preprocess_resamples_to_target() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("img.nii.gz");
    let output = dir.path().join("out.nii.gz");
    let img = Volume::from_fn(Dims::new(4, 4, 2).unwrap(), Spacing::new(1.0, 1.0, 4.0).unwrap(), |_, _, _| 80.3f32);
    save_nifti(&img, &input, true).unwrap();
    let out = iterseg(&["preprocess", "--input", p(&input), "--output", p(&output), "--target", "2,2,2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let v = iterseg::nifti::load_nifti(&output).unwrap().to_real::<f64>();
    assert_eq!(v.dims(), Dims::new(2, 2, 4).unwrap());
    assert!(v.spacing().approx_eq(&Spacing::isotropic(2.0).unwrap(), 1e-6));
    assert!(v.data().iter().all(|x| x.abs() < 1e-6));
}

#[test]
fn tta_command_reconstructs_labels() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(9);
    let dims = Dims::new(3, 4, 2).unwrap();
    let base = random_prob(&mut r, dims, 3);
    for f in enumerate_flips() {
        for (k, ch) in base.channels().iter().enumerate() {
            let flipped = apply_flip(&ch.map(|x| x as f32), f);
            save_nifti(&flipped, dir.path().join(format!("c__flip{}_prob_{k}.nii.gz", f.index())), true).unwrap();
        }
    }
    let out_path = dir.path().join("labels.nii.gz");
    let out = iterseg(&["tta", "--dir", p(dir.path()), "--name", "c", "--out", p(&out_path)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let want = iterseg::tta::argmax_labels(&base).unwrap();
    assert_eq!(read_labels(&out_path).unwrap().data(), want.data());
}

#[test]
fn monitor_prints_report() {
    let out = iterseg(&["monitor", "--period", "0.05", "--", "sleep", "0.3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["runtime_s"].as_f64().unwrap() >= 0.3);
    assert_eq!(report["runtime_over_tolerance_s"].as_f64(), Some(0.0));
}

#[test]
fn make_fixture_writes_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = iterseg(&["make-fixture", "--out", p(dir.path())]);
    assert!(out.status.success());
    let m = iterseg::pipeline::load_manifest(dir.path().join("manifest.json")).unwrap();
    assert_eq!(m.counts(), (1, 2, 1, 2));
}
