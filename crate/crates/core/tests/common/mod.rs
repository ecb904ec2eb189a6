//! Brute-force reference implementations shared by the integration and
//! acceptance tests. Each one follows the textbook definition directly and
//! shares no code with the library kernels.

#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::thread;
use std::time::Duration;

use iterseg::fusion::{majority_vote, merge_organ_tumor, merge_partial, FusionPolicy, PartialLabel};
use iterseg::metrics::{dsc, edt, nsd, NsdParams};
use iterseg::nifti::{list_dir, load_nifti, save_any, stem};
use iterseg::pipeline::fixture::{write_fixture, FixturePaths};
use iterseg::pipeline::state::digest_file;
use iterseg::pipeline::PipelineState;
use iterseg::postprocess::{connected_components, keep_largest, Connectivity};
use iterseg::tta::{aggregate, enumerate_flips, flip_prob};
use iterseg::{AnyVolume, ClassSet, Dims, LabelMap, ProbMap, Spacing, Volume};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn exe() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_iterseg"))
}

pub fn iterseg(args: &[&str]) -> Output {
    Command::new(exe()).args(args).output().expect("binary runs")
}

/// Synthetic dataset whose config drives this build's mock segmenter.
pub fn fixture(dir: &Path) -> FixturePaths {
    write_fixture(dir, &exe(), 7).expect("fixture written")
}

/// `iterseg run` on a fixture, with work files under `work`.
pub fn run_command(fx: &FixturePaths, work: &Path) -> Command {
    let mut cmd = Command::new(exe());
    cmd.arg("run")
        .arg("--config")
        .arg(&fx.config)
        .arg("--manifest")
        .arg(&fx.manifest)
        .arg("--state")
        .arg(work.join("state.json"));
    cmd
}

/// Starts a run and kills it with SIGKILL once the state file records at
/// least `checkpoint` checkpoints. Returns false if the run finished first.
pub fn kill_after(fx: &FixturePaths, work: &Path, checkpoint: u64) -> bool {
    let state = work.join("state.json");
    let mut child = run_command(fx, work).spawn().expect("binary runs");
    loop {
        if child.try_wait().expect("wait").is_some() {
            return false;
        }
        if let Ok(s) = PipelineState::load(&state) {
            if s.checkpoints >= checkpoint {
                child.kill().expect("kill");
                child.wait().expect("reap");
                return true;
            }
        }
        thread::sleep(Duration::from_millis(2));
    }
}

/// sha256 of every file in `work/final`, by case id.
pub fn final_digests(work: &Path) -> BTreeMap<String, String> {
    list_dir(&work.join("final"))
        .expect("final labels exist")
        .iter()
        .map(|p| (stem(p).unwrap().to_string(), digest_file(p).unwrap()))
        .collect()
}

pub fn random_spacing<R: Rng>(rng: &mut R) -> Spacing {
    Spacing::new(
        rng.random_range(0.3..3.0),
        rng.random_range(0.3..3.0),
        rng.random_range(0.3..5.0),
    )
    .unwrap()
}

/// Binary mask with each voxel set with probability `p`.
pub fn random_mask<R: Rng>(rng: &mut R, n: usize, spacing: Spacing, p: f64) -> Volume<u8> {
    let dims = Dims::new(n, n, n).unwrap();
    Volume::from_fn(dims, spacing, |_, _, _| u8::from(rng.random_bool(p)))
}

/// Label map over `classes` (background included when listed).
pub fn random_labels<R: Rng>(rng: &mut R, n: usize, classes: &[u8]) -> LabelMap {
    let dims = Dims::new(n, n, n).unwrap();
    let v = Volume::from_fn(dims, Spacing::unit(), |_, _, _| classes[rng.random_range(0..classes.len())]);
    LabelMap::new(v).unwrap()
}

pub fn coords(d: Dims) -> Vec<[usize; 3]> {
    let mut out = Vec::with_capacity(d.len());
    for z in 0..d.nz() {
        for y in 0..d.ny() {
            for x in 0..d.nx() {
                out.push([x, y, z]);
            }
        }
    }
    out
}

pub fn dist_mm(a: [usize; 3], b: [usize; 3], s: Spacing) -> f64 {
    let s = s.as_array();
    let mut sum = 0.0;
    for k in 0..3 {
        let d = (a[k] as f64 - b[k] as f64) * s[k];
        sum += d * d;
    }
    sum.sqrt()
}

pub fn oracle_dsc(a: &Volume<u8>, b: &Volume<u8>) -> f64 {
    let pa = a.data().iter().filter(|&&v| v != 0).count();
    let pb = b.data().iter().filter(|&&v| v != 0).count();
    let both = a.data().iter().zip(b.data()).filter(|(&x, &y)| x != 0 && y != 0).count();
    if pa + pb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (pa + pb) as f64
    }
}

/// Distance from every voxel to the nearest foreground voxel, by checking
/// all pairs.
pub fn oracle_edt(mask: &Volume<u8>, s: Spacing) -> Vec<f64> {
    let all = coords(mask.dims());
    let fg: Vec<[usize; 3]> = all.iter().copied().filter(|c| mask.get(c[0], c[1], c[2]) != 0).collect();
    all.iter()
        .map(|&c| fg.iter().map(|&f| dist_mm(c, f, s)).fold(f64::INFINITY, f64::min))
        .collect()
}

/// Foreground voxels with a face neighbour that is background or off-grid.
pub fn oracle_surface(mask: &Volume<u8>) -> Vec<[usize; 3]> {
    let d = mask.dims();
    let n = [d.nx() as isize, d.ny() as isize, d.nz() as isize];
    coords(d)
        .into_iter()
        .filter(|c| {
            if mask.get(c[0], c[1], c[2]) == 0 {
                return false;
            }
            let faces = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
            faces.iter().any(|o: &[isize; 3]| {
                let q = [c[0] as isize + o[0], c[1] as isize + o[1], c[2] as isize + o[2]];
                (0..3).any(|k| q[k] < 0 || q[k] >= n[k]) || mask.get(q[0] as usize, q[1] as usize, q[2] as usize) == 0
            })
        })
        .collect()
}

/// Surface voxels of each mask within `tau` of the other's surface, over
/// all surface voxels.
pub fn oracle_nsd(p: &Volume<u8>, g: &Volume<u8>, s: Spacing, tau: f64) -> f64 {
    let sp = oracle_surface(p);
    let sg = oracle_surface(g);
    match (sp.is_empty(), sg.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let near = |a: &[usize; 3], set: &[[usize; 3]]| set.iter().any(|b| dist_mm(*a, *b, s) <= tau);
    let hits = sp.iter().filter(|a| near(a, &sg)).count() + sg.iter().filter(|a| near(a, &sp)).count();
    hits as f64 / (sp.len() + sg.len()) as f64
}

/// Per-voxel tally; ties to the earliest source (sources listed by
/// priority) voting for a tied class.
pub fn oracle_vote(maps: &[&LabelMap], min_votes: Option<u32>) -> Vec<u8> {
    let len = maps[0].len();
    (0..len)
        .map(|i| {
            let votes: Vec<u8> = maps.iter().map(|m| m.data()[i]).collect();
            let count = |c: u8| votes.iter().filter(|&&v| v == c).count() as u32;
            let best = votes.iter().map(|&v| count(v)).max().unwrap();
            let winner = *votes.iter().find(|&&v| count(v) == best).unwrap();
            match min_votes {
                Some(k) if best < k => 0,
                _ => winner,
            }
        })
        .collect()
}

fn neighbours(c: Connectivity) -> Vec<[isize; 3]> {
    let mut out = Vec::new();
    for dz in -1..=1isize {
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let manhattan = dx.abs() + dy.abs() + dz.abs();
                let ok = match c {
                    Connectivity::Six => manhattan == 1,
                    Connectivity::TwentySix => manhattan > 0,
                };
                if ok {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

/// Components by breadth-first flood fill, seeded in scan order. Each
/// component is a list of linear indices.
pub fn oracle_components(mask: &Volume<u8>, conn: Connectivity) -> Vec<Vec<usize>> {
    let d = mask.dims();
    let n = [d.nx() as isize, d.ny() as isize, d.nz() as isize];
    let offs = neighbours(conn);
    let mut seen = vec![false; d.len()];
    let mut comps = Vec::new();
    for start in 0..d.len() {
        if mask.data()[start] == 0 || seen[start] {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (x, y, z) = d.coords(i);
            for o in &offs {
                let q = [x as isize + o[0], y as isize + o[1], z as isize + o[2]];
                if (0..3).any(|k| q[k] < 0 || q[k] >= n[k]) {
                    continue;
                }
                let j = d.index(q[0] as usize, q[1] as usize, q[2] as usize);
                if mask.data()[j] != 0 && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// Largest-component filter per listed class; ties keep the component
/// found first in scan order.
pub fn oracle_keep_largest(map: &LabelMap, classes: &[u8], conn: Connectivity) -> Vec<u8> {
    let mut out = map.data().to_vec();
    for &c in classes {
        let comps = oracle_components(&map.binarize(c), conn);
        let mut best = 0;
        for (i, comp) in comps.iter().enumerate() {
            if comp.len() > comps[best].len() {
                best = i;
            }
        }
        for (i, comp) in comps.iter().enumerate() {
            if i != best {
                for &v in comp {
                    out[v] = 0;
                }
            }
        }
    }
    out
}

// Seeded comparisons against the oracles above. Each returns a description
// of the first disagreement.

pub type Check = std::result::Result<(), String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// DSC, EDT and NSD on a random pair of 6x6x6 masks.
pub fn check_metrics(seed: u64) -> Check {
    let mut r = rng(seed);
    let s = random_spacing(&mut r);
    let (pa, pb) = (r.random_range(0.05..0.7), r.random_range(0.05..0.7));
    let p = random_mask(&mut r, 6, s, pa);
    let g = random_mask(&mut r, 6, s, pb);

    let got = dsc(&p, &g).map_err(|e| e.to_string())?;
    let want = oracle_dsc(&p, &g);
    if got != want {
        return Err(format!("seed {seed}: dsc {got} vs oracle {want}"));
    }

    let field = edt::<f64>(&p, s).map_err(|e| e.to_string())?;
    for (i, want) in oracle_edt(&p, s).into_iter().enumerate() {
        let got = field.at(i);
        let ok = if want.is_infinite() { got.is_infinite() } else { (got - want).abs() <= 1e-9 };
        if !ok {
            return Err(format!("seed {seed}: edt at {i} is {got}, oracle {want}"));
        }
    }

    let tau = r.random_range(0.2..4.0);
    let got = nsd(&p, &g, s, &NsdParams { tau }).map_err(|e| e.to_string())?;
    let want = oracle_nsd(&p, &g, s, tau);
    if got != want {
        return Err(format!("seed {seed}: nsd {got} vs oracle {want} at tau {tau}"));
    }
    Ok(())
}

const VOTE_CLASSES: [u8; 4] = [0, 1, 2, 14];

/// Vote tally, gt preservation and tumor count on random 5x5x5 maps.
pub fn check_fusion(seed: u64) -> Check {
    let mut r = rng(seed);
    let n_sources = r.random_range(1..=4);
    let maps: Vec<LabelMap> = (0..n_sources).map(|_| random_labels(&mut r, 5, &VOTE_CLASSES)).collect();
    let ids: Vec<String> = (0..n_sources).map(|i| format!("s{i}")).collect();
    let mut priority = ids.clone();
    priority.shuffle(&mut r);
    let mut policy = FusionPolicy::with_priority(priority.clone());
    policy.min_votes = if r.random_bool(0.5) { Some(r.random_range(1..=n_sources as u32)) } else { None };

    let mut sources: Vec<(&str, &LabelMap)> = ids.iter().map(String::as_str).zip(maps.iter()).collect();
    sources.shuffle(&mut r);
    let got = majority_vote(&sources, &policy).map_err(|e| e.to_string())?;
    let by_priority: Vec<&LabelMap> = priority
        .iter()
        .map(|id| &maps[ids.iter().position(|x| x == id).unwrap()])
        .collect();
    if got.data() != oracle_vote(&by_priority, policy.min_votes).as_slice() {
        return Err(format!("seed {seed}: majority_vote disagrees with the tally"));
    }

    let annotated = ClassSet::from_classes(VOTE_CLASSES[1..].iter().copied().filter(|_| r.random_bool(0.6)))
        .map_err(|e| e.to_string())?;
    let raw = random_labels(&mut r, 5, &VOTE_CLASSES);
    let gt_data = raw.data().iter().map(|&v| if annotated.contains(v) { v } else { 0 }).collect();
    let gt = PartialLabel::new(raw.with_labels(gt_data).unwrap(), annotated).map_err(|e| e.to_string())?;
    let pseudo = random_labels(&mut r, 5, &VOTE_CLASSES);
    let fp = FusionPolicy {
        gt_overrides: r.random_bool(0.5),
        gt_background_trust: r.random_bool(0.5),
        ..FusionPolicy::default()
    };
    let merged = merge_partial(&gt, &pseudo, &fp).map_err(|e| e.to_string())?;
    for (i, (&g, &m)) in gt.map().data().iter().zip(merged.data()).enumerate() {
        if g != 0 && (m == 0 || (fp.gt_overrides && m != g)) {
            return Err(format!("seed {seed}: merge_partial turned gt {g} into {m} at {i}"));
        }
    }

    let organ = random_labels(&mut r, 5, &[0, 1, 2, 3]);
    let tumor = random_labels(&mut r, 5, &[0, 14]);
    let out = merge_organ_tumor(&organ, &tumor, true).map_err(|e| e.to_string())?;
    let (before, after) = (tumor.histogram()[14], out.histogram()[14]);
    if before != after {
        return Err(format!("seed {seed}: tumor count {before} became {after}"));
    }
    Ok(())
}

/// Save then load a random volume of a random supported type.
pub fn check_nifti(seed: u64, dir: &Path) -> Check {
    let mut r = rng(seed);
    let dims = Dims::new(r.random_range(1..8), r.random_range(1..8), r.random_range(1..8)).unwrap();
    let s = random_spacing(&mut r);
    let vol = match seed % 4 {
        0 => AnyVolume::U8(Volume::from_fn(dims, s, |_, _, _| r.random())),
        1 => AnyVolume::I16(Volume::from_fn(dims, s, |_, _, _| r.random())),
        2 => AnyVolume::U16(Volume::from_fn(dims, s, |_, _, _| r.random())),
        _ => AnyVolume::F32(Volume::from_fn(dims, s, |_, _, _| r.random_range(-1e6f32..1e6))),
    };
    let compress = r.random_bool(0.5);
    let path = dir.join(if compress { format!("v{seed}.nii.gz") } else { format!("v{seed}.nii") });
    save_any(&vol, &path, compress).map_err(|e| e.to_string())?;
    let back = load_nifti(&path).map_err(|e| e.to_string())?;
    let same = match (&vol, &back) {
        (AnyVolume::U8(a), AnyVolume::U8(b)) => a.data() == b.data(),
        (AnyVolume::I16(a), AnyVolume::I16(b)) => a.data() == b.data(),
        (AnyVolume::U16(a), AnyVolume::U16(b)) => a.data() == b.data(),
        (AnyVolume::F32(a), AnyVolume::F32(b)) => a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()),
        _ => false,
    };
    if !same || back.dims() != dims {
        return Err(format!("seed {seed}: {:?} payload changed in round trip", vol.elem()));
    }
    if !back.spacing().approx_eq(&s, 1e-6) {
        return Err(format!("seed {seed}: spacing {:?} became {:?}", s, back.spacing()));
    }
    Ok(())
}

/// Random normalized probability map.
pub fn random_prob<R: Rng>(rng: &mut R, dims: Dims, classes: usize) -> ProbMap<f64> {
    let raw: Vec<Vec<f64>> = (0..dims.len())
        .map(|_| {
            let v: Vec<f64> = (0..classes).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
        .collect();
    let channels = (0..classes)
        .map(|c| Volume::from_vec(dims, Spacing::unit(), raw.iter().map(|p| p[c]).collect()).unwrap())
        .collect();
    ProbMap::new(channels).unwrap()
}

/// The eight flipped copies of one map, shuffled, aggregate back to it.
pub fn check_tta(seed: u64) -> Check {
    let mut r = rng(seed);
    let dims = Dims::new(r.random_range(1..6), r.random_range(1..6), r.random_range(1..6)).unwrap();
    let classes = r.random_range(2..6);
    let base = random_prob(&mut r, dims, classes);
    let mut entries: Vec<_> = enumerate_flips().into_iter().map(|f| (f, flip_prob(&base, f))).collect();
    entries.shuffle(&mut r);
    let agg = aggregate(&entries).map_err(|e| e.to_string())?;
    let diff = agg.max_abs_diff(&base).ok_or("class count changed")?;
    if diff > 1e-6 {
        return Err(format!("seed {seed}: reconstruction off by {diff}"));
    }
    Ok(())
}

/// Component labeling, keep_largest and its idempotence on a random map.
pub fn check_keep_largest(seed: u64) -> Check {
    let mut r = rng(seed);
    let mut classes = vec![0u8; r.random_range(1..5)];
    classes.extend([1, 2, 3]);
    let map = random_labels(&mut r, 6, &classes);
    let targets: Vec<u8> = [1u8, 2, 3].into_iter().filter(|_| r.random_bool(0.7)).collect();
    let set = ClassSet::from_classes(targets.iter().copied()).map_err(|e| e.to_string())?;
    for conn in [Connectivity::Six, Connectivity::TwentySix] {
        let cc = connected_components(&map.binarize(1), conn).map_err(|e| e.to_string())?;
        let want: Vec<usize> = oracle_components(&map.binarize(1), conn).iter().map(Vec::len).collect();
        if cc.sizes() != want.as_slice() {
            return Err(format!("seed {seed}: {conn:?} component sizes {:?} vs oracle {want:?}", cc.sizes()));
        }
        let once = keep_largest(&map, set, conn);
        if once.data() != oracle_keep_largest(&map, &targets, conn).as_slice() {
            return Err(format!("seed {seed}: {conn:?} keep_largest disagrees with flood fill"));
        }
        if keep_largest(&once, set, conn) != once {
            return Err(format!("seed {seed}: {conn:?} keep_largest is not idempotent"));
        }
    }
    Ok(())
}
