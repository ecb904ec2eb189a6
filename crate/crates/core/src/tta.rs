//! Flip test-time augmentation.
//!
//! Inputs are mirrored along every combination of the three grid axes, the
//! model runs on each variant, and the returned probability maps are
//! mirrored back and averaged.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::classes::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::{LabelMap, ProbMap, Volume};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FlipSpec {
    pub flip_x: bool,
    pub flip_y: bool,
    pub flip_z: bool,
}

impl FlipSpec {
    pub const IDENTITY: FlipSpec = FlipSpec {
        flip_x: false,
        flip_y: false,
        flip_z: false,
    };

    /// Position in [`enumerate_flips`]: x is the high bit, z the low bit.
    pub fn index(self) -> usize {
        (usize::from(self.flip_x) << 2) | (usize::from(self.flip_y) << 1) | usize::from(self.flip_z)
    }

    pub fn from_index(i: usize) -> FlipSpec {
        FlipSpec {
            flip_x: i & 4 != 0,
            flip_y: i & 2 != 0,
            flip_z: i & 1 != 0,
        }
    }

    pub fn is_identity(self) -> bool {
        self == FlipSpec::IDENTITY
    }
}

/// All eight flip combinations, counting (x, y, z) in binary from no flip.
pub fn enumerate_flips() -> Vec<FlipSpec> {
    (0..8).map(FlipSpec::from_index).collect()
}

/// Axis-reversed copy; spacing and metadata unchanged.
pub fn apply_flip<T: Copy>(vol: &Volume<T>, spec: FlipSpec) -> Volume<T> {
    if spec.is_identity() {
        return vol.clone();
    }
    let d = vol.dims();
    let (nx, ny, nz) = (d.nx(), d.ny(), d.nz());
    let mut data = Vec::with_capacity(vol.len());
    for z in 0..nz {
        let sz = if spec.flip_z { nz - 1 - z } else { z };
        for y in 0..ny {
            let sy = if spec.flip_y { ny - 1 - y } else { y };
            for x in 0..nx {
                let sx = if spec.flip_x { nx - 1 - x } else { x };
                data.push(vol.get(sx, sy, sz));
            }
        }
    }
    vol.with_data(data).expect("flip preserves size")
}

pub fn flip_labels(map: &LabelMap, spec: FlipSpec) -> LabelMap {
    LabelMap::new(apply_flip(map.as_volume(), spec)).expect("flip preserves values")
}

pub fn flip_prob<F: Real>(prob: &ProbMap<F>, spec: FlipSpec) -> ProbMap<F> {
    ProbMap::from_channels_unchecked(prob.channels().iter().map(|c| apply_flip(c, spec)).collect())
}

fn cmp_maps<F: Real>(a: &ProbMap<F>, b: &ProbMap<F>) -> Ordering {
    for (ca, cb) in a.channels().iter().zip(b.channels()) {
        for (&x, &y) in ca.data().iter().zip(cb.data()) {
            match x.partial_cmp(&y) {
                Some(Ordering::Equal) | None => {}
                Some(o) => return o,
            }
        }
    }
    Ordering::Equal
}

/// Undoes each entry's flip and averages the maps voxelwise per class,
/// renormalizing every voxel to sum to one.
///
/// Entries are reduced in a canonical order, so the result is bit-identical
/// for any permutation of `probs`.
pub fn aggregate<F: Real>(probs: &[(FlipSpec, ProbMap<F>)]) -> Result<ProbMap<F>> {
    let (_, first) = probs.first().ok_or(Error::EmptyInput("no TTA entries to aggregate"))?;
    for (_, p) in &probs[1..] {
        if p.num_classes() != first.num_classes() {
            return Err(Error::InvalidProbMap(format!(
                "class count mismatch: {} vs {}",
                first.num_classes(),
                p.num_classes()
            )));
        }
        first.channel(0).check_same_dims(p.channel(0))?;
    }

    let mut order: Vec<&(FlipSpec, ProbMap<F>)> = probs.iter().collect();
    order.sort_by(|a, b| a.0.index().cmp(&b.0.index()).then_with(|| cmp_maps(&a.1, &b.1)));

    let len = first.channel(0).len();
    let classes = first.num_classes();
    let mut sums = vec![vec![F::zero(); len]; classes];
    for (spec, prob) in order {
        let unflipped = flip_prob(prob, *spec);
        for (acc, ch) in sums.iter_mut().zip(unflipped.channels()) {
            for (a, &v) in acc.iter_mut().zip(ch.data()) {
                *a = *a + v;
            }
        }
    }
    for i in 0..len {
        let total: F = sums.iter().map(|c| c[i]).sum();
        if total > F::zero() {
            for c in sums.iter_mut() {
                c[i] = c[i] / total;
            }
        }
    }
    let template = first.channel(0);
    let channels = sums
        .into_iter()
        .map(|c| template.with_data(c))
        .collect::<Result<Vec<_>>>()?;
    ProbMap::new(channels)
}

/// Per voxel, the lowest class index with the highest probability.
pub fn argmax_labels<F: Real>(prob: &ProbMap<F>) -> Result<LabelMap> {
    if prob.num_classes() > NUM_CLASSES {
        return Err(Error::InvalidProbMap(format!(
            "{} classes do not fit a label map",
            prob.num_classes()
        )));
    }
    let len = prob.channel(0).len();
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let mut best = 0usize;
        let mut best_p = prob.channel(0).data()[i];
        for c in 1..prob.num_classes() {
            let p = prob.channel(c).data()[i];
            if p > best_p {
                best = c;
                best_p = p;
            }
        }
        out.push(best as u8);
    }
    LabelMap::new(prob.channel(0).with_data(out)?)
}
