//! Exact anisotropic Euclidean distance transform and surface extraction.
//!
//! The transform runs the lower-envelope-of-parabolas pass once per axis
//! on squared distances, weighting each axis by its voxel spacing.

use crate::error::Result;
use crate::scalar::Real;
use crate::volume::{Spacing, Volume};

/// Distances in millimeters to the nearest foreground voxel center.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField<F> {
    distances: Volume<F>,
    has_foreground: bool,
}

impl<F: Real> DistanceField<F> {
    pub fn distances(&self) -> &Volume<F> {
        &self.distances
    }

    pub fn into_distances(self) -> Volume<F> {
        self.distances
    }

    /// False when the mask had no foreground; every distance is then +inf.
    pub fn has_foreground(&self) -> bool {
        self.has_foreground
    }

    pub fn at(&self, i: usize) -> F {
        self.distances.data()[i]
    }
}

/// One line of the squared transform: `f(q) = min_p (w (q - p))^2 + g(p)`.
///
/// `v`, `z` are scratch buffers of length `n` and `n + 1`.
fn envelope_1d<F: Real>(g: &[F], w: F, out: &mut [F], v: &mut [usize], z: &mut [F]) {
    let n = g.len();
    let pos = |i: usize| F::of(i as f64) * w;
    let mut k: isize = -1;
    for q in 0..n {
        if g[q].is_infinite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                v[0] = q;
                z[0] = F::neg_infinity();
                z[1] = F::infinity();
                break;
            }
            let vk = v[k as usize];
            let (sq, sv) = (pos(q), pos(vk));
            let s = ((g[q] + sq * sq) - (g[vk] + sv * sv)) / (F::of(2.0) * (sq - sv));
            if s <= z[k as usize] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = F::infinity();
            break;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = F::infinity());
        return;
    }
    let mut j = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        let sq = pos(q);
        while z[j + 1] < sq {
            j += 1;
        }
        let d = F::of(q as f64 - v[j] as f64) * w;
        *o = d * d + g[v[j]];
    }
}

/// Squared distances; separable over the three axes.
pub fn edt_squared<F: Real>(mask: &Volume<u8>, spacing: Spacing) -> Result<Volume<F>> {
    mask.check_binary()?;
    let dims = mask.dims();
    let mut data: Vec<F> = mask
        .data()
        .iter()
        .map(|&m| if m != 0 { F::zero() } else { F::infinity() })
        .collect();

    let weights = spacing.as_array();
    let max_n = *dims.0.iter().max().expect("3 axes");
    let mut line = vec![F::zero(); max_n];
    let mut out = vec![F::zero(); max_n];
    let mut v = vec![0usize; max_n];
    let mut z = vec![F::zero(); max_n + 1];

    for axis in 0..3 {
        let n = dims.0[axis];
        let stride = dims.stride(axis);
        let w = F::of(weights[axis]);
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for j in 0..dims.0[b] {
            for i in 0..dims.0[a] {
                let mut pos = [0usize; 3];
                pos[a] = i;
                pos[b] = j;
                let base = dims.index(pos[0], pos[1], pos[2]);
                for t in 0..n {
                    line[t] = data[base + t * stride];
                }
                envelope_1d(&line[..n], w, &mut out[..n], &mut v[..n], &mut z[..n + 1]);
                for t in 0..n {
                    data[base + t * stride] = out[t];
                }
            }
        }
    }
    mask.with_data(data)
}

/// Exact Euclidean distance (mm) from each voxel center to the nearest
/// foreground voxel center.
pub fn edt<F: Real>(mask: &Volume<u8>, spacing: Spacing) -> Result<DistanceField<F>> {
    let has_foreground = mask.data().iter().any(|&m| m != 0);
    let sq = edt_squared::<F>(mask, spacing)?;
    Ok(DistanceField {
        distances: sq.map(|d| d.sqrt()),
        has_foreground,
    })
}

/// Foreground voxels with at least one face neighbour that is background or
/// outside the grid.
pub fn surface_voxels(mask: &Volume<u8>) -> Result<Volume<u8>> {
    mask.check_binary()?;
    let d = mask.dims();
    let (nx, ny, nz) = (d.nx(), d.ny(), d.nz());
    let m = mask.data();
    let out = Volume::from_fn(d, mask.spacing(), |x, y, z| {
        if m[d.index(x, y, z)] == 0 {
            return 0;
        }
        let border = x == 0 || y == 0 || z == 0 || x + 1 == nx || y + 1 == ny || z + 1 == nz;
        if border {
            return 1;
        }
        let exposed = m[d.index(x - 1, y, z)] == 0
            || m[d.index(x + 1, y, z)] == 0
            || m[d.index(x, y - 1, z)] == 0
            || m[d.index(x, y + 1, z)] == 0
            || m[d.index(x, y, z - 1)] == 0
            || m[d.index(x, y, z + 1)] == 0;
        u8::from(exposed)
    });
    Ok(out.with_orientation(*mask.orientation()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    fn single(n: usize, at: (usize, usize, usize)) -> Volume<u8> {
        Volume::from_fn(Dims::new(n, n, n).unwrap(), Spacing::unit(), |x, y, z| u8::from((x, y, z) == at))
    }

    #[test]
    fn axis_distance_scales_with_spacing() {
        let m = Volume::from_fn(Dims::new(5, 1, 1).unwrap(), Spacing::unit(), |x, _, _| u8::from(x == 0));
        let f = edt::<f64>(&m, Spacing::new(2.0, 1.0, 1.0).unwrap()).unwrap();
        assert_eq!(f.distances().get(3, 0, 0), 6.0);
        assert_eq!(f.distances().get(0, 0, 0), 0.0);
    }

    #[test]
    fn diagonal_is_sqrt3() {
        let f = edt::<f64>(&single(3, (1, 1, 1)), Spacing::unit()).unwrap();
        assert!((f.distances().get(0, 0, 0) - 3f64.sqrt()).abs() < 1e-15);
        assert!(f.has_foreground());
    }

    #[test]
    fn empty_mask_is_infinite() {
        let m = Volume::filled(Dims::new(3, 2, 2).unwrap(), Spacing::unit(), 0u8);
        let f = edt::<f32>(&m, Spacing::unit()).unwrap();
        assert!(!f.has_foreground());
        assert!(f.distances().data().iter().all(|d| d.is_infinite()));
    }

    #[test]
    fn non_binary_rejected() {
        let m = Volume::filled(Dims::new(2, 2, 2).unwrap(), Spacing::unit(), 3u8);
        assert!(edt::<f64>(&m, Spacing::unit()).is_err());
        assert!(surface_voxels(&m).is_err());
    }

    #[test]
    fn surface_examples() {
        let one = single(3, (1, 1, 1));
        assert_eq!(surface_voxels(&one).unwrap(), one);

        let cube = Volume::filled(Dims::new(3, 3, 3).unwrap(), Spacing::unit(), 1u8);
        let s = surface_voxels(&cube).unwrap();
        assert_eq!(s.count_nonzero(), 26);
        assert_eq!(s.get(1, 1, 1), 0);

        // solid 3x3x3 block inside a 5^3 grid: same 26
        let inner = Volume::from_fn(Dims::new(5, 5, 5).unwrap(), Spacing::unit(), |x, y, z| {
            u8::from((1..4).contains(&x) && (1..4).contains(&y) && (1..4).contains(&z))
        });
        assert_eq!(surface_voxels(&inner).unwrap().count_nonzero(), 26);

        let empty = Volume::filled(Dims::new(2, 2, 2).unwrap(), Spacing::unit(), 0u8);
        assert_eq!(surface_voxels(&empty).unwrap().count_nonzero(), 0);
    }
}
