//! In-memory 3D volumes.
//!
//! Voxels are stored densely with x varying fastest, then y, then z. A
//! [`Volume`] is immutable once built; operations produce new volumes.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::classes::{MAX_CLASS, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::scalar::{ElemType, Element, Real};

/// Millimeters per voxel along x, y and z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct Spacing {
    dx: f64,
    dy: f64,
    dz: f64,
}

impl Spacing {
    pub fn new(dx: f64, dy: f64, dz: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if ok(dx) && ok(dy) && ok(dz) {
            Ok(Spacing { dx, dy, dz })
        } else {
            Err(Error::InvalidSpacing(dx, dy, dz))
        }
    }

    pub fn isotropic(d: f64) -> Result<Self> {
        Spacing::new(d, d, d)
    }

    pub fn unit() -> Self {
        Spacing {
            dx: 1.0,
            dy: 1.0,
            dz: 1.0,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.dx, self.dy, self.dz]
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn dy(&self) -> f64 {
        self.dy
    }

    pub fn dz(&self) -> f64 {
        self.dz
    }

    /// Equality within `tol` millimeters on every axis.
    pub fn approx_eq(&self, other: &Spacing, tol: f64) -> bool {
        self.as_array()
            .iter()
            .zip(other.as_array())
            .all(|(a, b)| (a - b).abs() <= tol)
    }
}

impl TryFrom<[f64; 3]> for Spacing {
    type Error = Error;

    fn try_from(v: [f64; 3]) -> Result<Self> {
        Spacing::new(v[0], v[1], v[2])
    }
}

impl From<Spacing> for [f64; 3] {
    fn from(s: Spacing) -> Self {
        s.as_array()
    }
}

/// Grid size `(nx, ny, nz)`, every component at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims(pub [usize; 3]);

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Result<Self> {
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::BadDims([nx as i64, ny as i64, nz as i64]));
        }
        Ok(Dims([nx, ny, nz]))
    }

    pub fn nx(&self) -> usize {
        self.0[0]
    }

    pub fn ny(&self) -> usize {
        self.0[1]
    }

    pub fn nz(&self) -> usize {
        self.0[2]
    }

    pub fn len(&self) -> usize {
        self.0.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.0[0] * (y + self.0[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> (usize, usize, usize) {
        let x = i % self.0[0];
        let rest = i / self.0[0];
        (x, rest % self.0[1], rest / self.0[1])
    }

    /// Linear stride between neighbours along `axis`.
    pub fn stride(&self, axis: usize) -> usize {
        match axis {
            0 => 1,
            1 => self.0[0],
            _ => self.0[0] * self.0[1],
        }
    }
}

/// Orientation header fields, carried through I/O untouched.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Orientation {
    pub qform_code: i16,
    pub sform_code: i16,
    /// pixdim[0]
    pub qfac: f32,
    /// quatern_b, quatern_c, quatern_d, qoffset_x, qoffset_y, qoffset_z
    pub quatern: [f32; 6],
    pub srow: [[f32; 4]; 3],
}

impl Default for Orientation {
    fn default() -> Self {
        Orientation {
            qform_code: 0,
            sform_code: 0,
            qfac: 1.0,
            quatern: [0.0; 6],
            srow: [[0.0; 4]; 3],
        }
    }
}

/// Linear intensity mapping `slope * stored + intercept` applied at load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rescale {
    pub slope: f32,
    pub intercept: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    dims: Dims,
    spacing: Spacing,
    data: Vec<T>,
    orientation: Orientation,
    intensity_rescale: Option<Rescale>,
}

impl<T: Copy> Volume<T> {
    pub fn from_vec(dims: Dims, spacing: Spacing, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::DataLength {
                dims: dims.0,
                expected: dims.len(),
                actual: data.len(),
            });
        }
        Ok(Volume {
            dims,
            spacing,
            data,
            orientation: Orientation::default(),
            intensity_rescale: None,
        })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: T) -> Self {
        Volume {
            dims,
            spacing,
            data: vec![value; dims.len()],
            orientation: Orientation::default(),
            intensity_rescale: None,
        }
    }

    pub fn from_fn(dims: Dims, spacing: Spacing, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for z in 0..dims.nz() {
            for y in 0..dims.ny() {
                for x in 0..dims.nx() {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume {
            dims,
            spacing,
            data,
            orientation: Orientation::default(),
            intensity_rescale: None,
        }
    }

    pub fn with_orientation(mut self, orientation: Orientation) -> Self {
        self.orientation = orientation;
        self
    }

    pub(crate) fn with_rescale(mut self, rescale: Option<Rescale>) -> Self {
        self.intensity_rescale = rescale;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn orientation(&self) -> &Orientation {
        &self.orientation
    }

    pub fn intensity_rescale(&self) -> Option<Rescale> {
        self.intensity_rescale
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.dims.index(x, y, z)]
    }

    /// Same geometry and metadata, new voxel values.
    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Volume<U> {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().copied().map(f).collect(),
            orientation: self.orientation,
            intensity_rescale: None,
        }
    }

    /// Same geometry and metadata with the given data.
    pub fn with_data<U: Copy>(&self, data: Vec<U>) -> Result<Volume<U>> {
        Ok(Volume::from_vec(self.dims, self.spacing, data)?.with_orientation(self.orientation))
    }

    pub fn check_same_dims<U>(&self, other: &Volume<U>) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch {
                left: self.dims.0,
                right: other.dims.0,
            });
        }
        Ok(())
    }

    pub fn check_same_grid<U>(&self, other: &Volume<U>) -> Result<()> {
        self.check_same_dims(other)?;
        if !self.spacing.approx_eq(&other.spacing, 1e-6) {
            return Err(Error::SpacingMismatch {
                left: self.spacing.as_array(),
                right: other.spacing.as_array(),
            });
        }
        Ok(())
    }
}

impl<T: Element> Volume<T> {
    /// Promotes to a float volume, applying any recorded intensity rescale.
    pub fn to_real<F: Real>(&self) -> Volume<F> {
        let (slope, inter) = match self.intensity_rescale {
            Some(r) => (r.slope as f64, r.intercept as f64),
            None => (1.0, 0.0),
        };
        let identity = slope == 1.0 && inter == 0.0;
        self.map(|v| {
            let x = v.to_f64().unwrap_or(f64::NAN);
            F::of(if identity { x } else { slope * x + inter })
        })
    }
}

impl Volume<u8> {
    /// Fails unless every voxel is 0 or 1.
    pub fn check_binary(&self) -> Result<()> {
        match self.data.iter().position(|&v| v > 1) {
            Some(index) => Err(Error::NonBinary {
                value: self.data[index],
                index,
            }),
            None => Ok(()),
        }
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }
}

/// A loaded volume of any supported on-disk type.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyVolume {
    U8(Volume<u8>),
    I16(Volume<i16>),
    U16(Volume<u16>),
    F32(Volume<f32>),
}

macro_rules! any_dispatch {
    ($self:expr, $v:ident => $body:expr) => {
        match $self {
            AnyVolume::U8($v) => $body,
            AnyVolume::I16($v) => $body,
            AnyVolume::U16($v) => $body,
            AnyVolume::F32($v) => $body,
        }
    };
}

impl AnyVolume {
    pub fn elem(&self) -> ElemType {
        match self {
            AnyVolume::U8(_) => ElemType::U8,
            AnyVolume::I16(_) => ElemType::I16,
            AnyVolume::U16(_) => ElemType::U16,
            AnyVolume::F32(_) => ElemType::F32,
        }
    }

    pub fn dims(&self) -> Dims {
        any_dispatch!(self, v => v.dims())
    }

    pub fn spacing(&self) -> Spacing {
        any_dispatch!(self, v => v.spacing())
    }

    pub fn to_real<F: Real>(&self) -> Volume<F> {
        any_dispatch!(self, v => v.to_real())
    }

    /// Interprets the values as class labels. Any element type is accepted
    /// as long as every value is an integer in 0..=14.
    pub fn into_labels(self) -> Result<LabelMap> {
        match self {
            AnyVolume::U8(v) if v.intensity_rescale.is_none() => LabelMap::new(v),
            other => {
                let real = other.to_real::<f64>();
                let mut out = Vec::with_capacity(real.len());
                for (index, &x) in real.data().iter().enumerate() {
                    if x.fract() != 0.0 || !(0.0..=MAX_CLASS as f64).contains(&x) {
                        return Err(Error::LabelOutOfRange { value: x, index });
                    }
                    out.push(x as u8);
                }
                LabelMap::new(real.with_data(out)?)
            }
        }
    }
}

impl From<Volume<u8>> for AnyVolume {
    fn from(v: Volume<u8>) -> Self {
        AnyVolume::U8(v)
    }
}

impl From<Volume<i16>> for AnyVolume {
    fn from(v: Volume<i16>) -> Self {
        AnyVolume::I16(v)
    }
}

impl From<Volume<u16>> for AnyVolume {
    fn from(v: Volume<u16>) -> Self {
        AnyVolume::U16(v)
    }
}

impl From<Volume<f32>> for AnyVolume {
    fn from(v: Volume<f32>) -> Self {
        AnyVolume::F32(v)
    }
}

impl From<LabelMap> for AnyVolume {
    fn from(m: LabelMap) -> Self {
        AnyVolume::U8(m.0)
    }
}

/// A `u8` volume whose values are class ids in 0..=14.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap(Volume<u8>);

impl LabelMap {
    pub fn new(vol: Volume<u8>) -> Result<Self> {
        if let Some(index) = vol.data.iter().position(|&v| v > MAX_CLASS) {
            return Err(Error::LabelOutOfRange {
                value: vol.data[index] as f64,
                index,
            });
        }
        Ok(LabelMap(vol))
    }

    pub fn background(dims: Dims, spacing: Spacing) -> Self {
        LabelMap(Volume::filled(dims, spacing, 0))
    }

    pub fn from_vec(dims: Dims, spacing: Spacing, data: Vec<u8>) -> Result<Self> {
        LabelMap::new(Volume::from_vec(dims, spacing, data)?)
    }

    /// Same geometry as `self` with new labels.
    pub fn with_labels(&self, data: Vec<u8>) -> Result<LabelMap> {
        LabelMap::new(self.0.with_data(data)?)
    }

    pub fn as_volume(&self) -> &Volume<u8> {
        &self.0
    }

    pub fn into_volume(self) -> Volume<u8> {
        self.0
    }

    /// 0/1 mask of voxels equal to `class`.
    pub fn binarize(&self, class: u8) -> Volume<u8> {
        self.0.map(|v| u8::from(v == class))
    }

    /// Number of voxels per class value, indexed by class id.
    pub fn histogram(&self) -> [usize; NUM_CLASSES] {
        let mut h = [0usize; NUM_CLASSES];
        for &v in &self.0.data {
            h[v as usize] += 1;
        }
        h
    }
}

impl Deref for LabelMap {
    type Target = Volume<u8>;

    fn deref(&self) -> &Volume<u8> {
        &self.0
    }
}

/// Number of voxels whose label equals `class_id`.
pub fn voxel_count(map: &LabelMap, class_id: u32) -> Result<usize> {
    let class = crate::classes::check_class(class_id)?;
    Ok(map.data().iter().filter(|&&v| v == class).count())
}

/// Per-class probability channels over a shared grid; channel `c` is class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap<F> {
    channels: Vec<Volume<F>>,
}

/// Tolerance for the per-voxel sum-to-one check.
pub const PROB_SUM_TOL: f64 = 1e-4;

impl<F: Real> ProbMap<F> {
    pub fn new(channels: Vec<Volume<F>>) -> Result<Self> {
        let map = ProbMap { channels };
        map.validate()?;
        Ok(map)
    }

    /// One-hot probabilities for a label map over `num_classes` channels.
    pub fn one_hot(labels: &LabelMap, num_classes: usize) -> Result<Self> {
        if let Some(&v) = labels.data().iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::InvalidProbMap(format!(
                "label {v} does not fit in {num_classes} channels"
            )));
        }
        let channels = (0..num_classes)
            .map(|c| labels.map(|v| if v as usize == c { F::one() } else { F::zero() }))
            .collect();
        ProbMap::new(channels)
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .channels
            .first()
            .ok_or(Error::InvalidProbMap("no channels".into()))?;
        for ch in &self.channels[1..] {
            first.check_same_dims(ch)?;
        }
        let tol = F::of(PROB_SUM_TOL);
        for i in 0..first.len() {
            let mut sum = F::zero();
            for (c, ch) in self.channels.iter().enumerate() {
                let p = ch.data[i];
                if !(p >= F::zero() && p <= F::one()) {
                    return Err(Error::InvalidProbMap(format!(
                        "probability {p:?} of class {c} at voxel {i} outside [0, 1]"
                    )));
                }
                sum = sum + p;
            }
            if (sum - F::one()).abs() > tol {
                return Err(Error::InvalidProbMap(format!(
                    "probabilities at voxel {i} sum to {sum:?}"
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn from_channels_unchecked(channels: Vec<Volume<F>>) -> Self {
        ProbMap { channels }
    }

    pub fn num_classes(&self) -> usize {
        self.channels.len()
    }

    pub fn dims(&self) -> Dims {
        self.channels[0].dims()
    }

    pub fn spacing(&self) -> Spacing {
        self.channels[0].spacing()
    }

    pub fn channel(&self, class: usize) -> &Volume<F> {
        &self.channels[class]
    }

    pub fn channels(&self) -> &[Volume<F>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Volume<F>> {
        self.channels
    }

    /// Largest absolute per-voxel difference across all channels.
    pub fn max_abs_diff(&self, other: &ProbMap<F>) -> Option<F> {
        if self.num_classes() != other.num_classes() || self.dims() != other.dims() {
            return None;
        }
        let mut worst = F::zero();
        for (a, b) in self.channels.iter().zip(&other.channels) {
            for (&x, &y) in a.data.iter().zip(&b.data) {
                worst = worst.max((x - y).abs());
            }
        }
        Some(worst)
    }
}
