//! Intensity normalization and anisotropic resampling.
//!
//! Resampling uses voxel-center alignment: output voxel `i` samples input
//! coordinate `(i + 0.5) * target / old - 0.5`, clamped to `[0, n - 1]`.
//! Images are interpolated separably (bilinear in the x/y plane, linear
//! along z); label maps take the nearest input voxel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::{Dims, LabelMap, Spacing, Volume};

/// HU clipping window followed by z-scoring with fixed dataset statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NormalizationParams {
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub mean: f64,
    pub std: f64,
}

impl Default for NormalizationParams {
    /// 0.5 / 99.5 percentile window and foreground statistics of the
    /// abdominal CT training corpus.
    fn default() -> Self {
        NormalizationParams {
            clip_lo: -970.0,
            clip_hi: 279.0,
            mean: 80.3,
            std: 141.4,
        }
    }
}

impl NormalizationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.std.is_finite() && self.std > 0.0) {
            return Err(Error::InvalidParams(format!("std must be > 0, got {}", self.std)));
        }
        if !(self.clip_lo < self.clip_hi) {
            return Err(Error::InvalidParams(format!(
                "clip_lo ({}) must be below clip_hi ({})",
                self.clip_lo, self.clip_hi
            )));
        }
        if !self.mean.is_finite() {
            return Err(Error::InvalidParams("mean must be finite".into()));
        }
        Ok(())
    }

    /// Output range `[(clip_lo - mean) / std, (clip_hi - mean) / std]`.
    pub fn output_range(&self) -> (f64, f64) {
        (
            (self.clip_lo - self.mean) / self.std,
            (self.clip_hi - self.mean) / self.std,
        )
    }
}

/// `(clamp(x, clip_lo, clip_hi) - mean) / std` per voxel.
pub fn clip_normalize<F: Real>(vol: &Volume<F>, params: &NormalizationParams) -> Result<Volume<F>> {
    params.validate()?;
    let lo = F::of(params.clip_lo);
    let hi = F::of(params.clip_hi);
    let mean = F::of(params.mean);
    let std = F::of(params.std);
    Ok(vol.map(|x| (x.max(lo).min(hi) - mean) / std))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InPlaneMode {
    #[default]
    Trilinear,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThroughPlaneMode {
    #[default]
    Linear,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    #[default]
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResampleSpec {
    pub target: Spacing,
    #[serde(default)]
    pub in_plane_mode: InPlaneMode,
    #[serde(default)]
    pub through_plane_mode: ThroughPlaneMode,
    #[serde(default)]
    pub label_mode: LabelMode,
}

impl ResampleSpec {
    pub fn new(target: Spacing) -> Self {
        ResampleSpec {
            target,
            in_plane_mode: InPlaneMode::Trilinear,
            through_plane_mode: ThroughPlaneMode::Linear,
            label_mode: LabelMode::Nearest,
        }
    }

    pub fn from_mm(dx: f64, dy: f64, dz: f64) -> Result<Self> {
        Ok(ResampleSpec::new(Spacing::new(dx, dy, dz)?))
    }
}

/// Output grid size for resampling `n` voxels of size `old` to size `target`.
pub fn resampled_len(n: usize, old: f64, target: f64) -> usize {
    ((n as f64 * old / target).round() as usize).max(1)
}

pub fn resampled_dims(dims: Dims, from: Spacing, to: Spacing) -> Dims {
    let (f, t) = (from.as_array(), to.as_array());
    Dims([
        resampled_len(dims.0[0], f[0], t[0]),
        resampled_len(dims.0[1], f[1], t[1]),
        resampled_len(dims.0[2], f[2], t[2]),
    ])
}

/// Input coordinate sampled by output voxel `i`.
#[inline]
pub fn source_coord(i: usize, old: f64, target: f64, n_in: usize) -> f64 {
    let c = (i as f64 + 0.5) * (target / old) - 0.5;
    c.clamp(0.0, (n_in - 1) as f64)
}

/// Per-output-index interpolation taps `(i0, i1, w)` along one axis.
fn linear_taps(n_in: usize, n_out: usize, old: f64, target: f64) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let c = source_coord(i, old, target, n_in);
            let i0 = c.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, c - i0 as f64)
        })
        .collect()
}

fn nearest_taps(n_in: usize, n_out: usize, old: f64, target: f64) -> Vec<usize> {
    (0..n_out)
        .map(|i| {
            let c = source_coord(i, old, target, n_in);
            ((c + 0.5).floor() as usize).min(n_in - 1)
        })
        .collect()
}

/// Linear interpolation along one axis, producing a new grid.
fn interp_axis<F: Real>(data: &[F], dims: Dims, axis: usize, taps: &[(usize, usize, f64)]) -> (Vec<F>, Dims) {
    let mut out_dims = dims;
    out_dims.0[axis] = taps.len();
    let in_stride = dims.stride(axis);
    let mut out = Vec::with_capacity(out_dims.len());
    for z in 0..out_dims.nz() {
        for y in 0..out_dims.ny() {
            for x in 0..out_dims.nx() {
                let mut pos = [x, y, z];
                let (i0, i1, w) = taps[pos[axis]];
                pos[axis] = 0;
                let base = dims.index(pos[0], pos[1], pos[2]);
                let a = data[base + i0 * in_stride];
                let b = data[base + i1 * in_stride];
                let w = F::of(w);
                let v = a * (F::one() - w) + b * w;
                // keep the result inside [min(a, b), max(a, b)] despite rounding
                out.push(v.max(a.min(b)).min(a.max(b)));
            }
        }
    }
    (out, out_dims)
}

/// Resamples an image to `spec.target` spacing.
pub fn resample_image<F: Real>(vol: &Volume<F>, spec: &ResampleSpec) -> Result<Volume<F>> {
    let old = vol.spacing().as_array();
    let target = spec.target.as_array();
    let out_dims = resampled_dims(vol.dims(), vol.spacing(), spec.target);

    let mut data = vol.data().to_vec();
    let mut dims = vol.dims();
    for axis in 0..3 {
        if old[axis] == target[axis] {
            continue;
        }
        let taps = linear_taps(dims.0[axis], out_dims.0[axis], old[axis], target[axis]);
        let (d, nd) = interp_axis(&data, dims, axis, &taps);
        data = d;
        dims = nd;
    }
    Ok(Volume::from_vec(out_dims, spec.target, data)?.with_orientation(*vol.orientation()))
}

/// Nearest-neighbour resampling for label maps.
pub fn resample_labels(map: &LabelMap, spec: &ResampleSpec) -> Result<LabelMap> {
    let vol = resample_nearest(map.as_volume(), spec)?;
    LabelMap::new(vol)
}

pub fn resample_nearest<T: Copy>(vol: &Volume<T>, spec: &ResampleSpec) -> Result<Volume<T>> {
    let old = vol.spacing().as_array();
    let target = spec.target.as_array();
    let dims = vol.dims();
    let out_dims = resampled_dims(dims, vol.spacing(), spec.target);
    let tx = nearest_taps(dims.nx(), out_dims.nx(), old[0], target[0]);
    let ty = nearest_taps(dims.ny(), out_dims.ny(), old[1], target[1]);
    let tz = nearest_taps(dims.nz(), out_dims.nz(), old[2], target[2]);
    let out = Volume::from_fn(out_dims, spec.target, |x, y, z| vol.get(tx[x], ty[y], tz[z]));
    Ok(out.with_orientation(*vol.orientation()))
}

/// Per-axis median of `spacings`; for even counts the lower median.
pub fn median_spacing(spacings: &[Spacing]) -> Result<Spacing> {
    if spacings.is_empty() {
        return Err(Error::EmptyInput("no spacings to take a median of"));
    }
    let mut axes = [Vec::new(), Vec::new(), Vec::new()];
    for s in spacings {
        for (axis, v) in s.as_array().into_iter().enumerate() {
            axes[axis].push(v);
        }
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[(v.len() - 1) / 2]
    };
    let [mut x, mut y, mut z] = axes;
    Spacing::new(median(&mut x), median(&mut y), median(&mut z))
}
