//! Connected-component cleanup: per class, keep only the largest component.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classes::ClassSet;
use crate::error::{Error, Result};
use crate::volume::{LabelMap, Volume};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    /// Face neighbours.
    Six,
    /// Face, edge and corner neighbours.
    #[default]
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::InvalidParams(format!("connectivity must be 6 or 26, got {other}"))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }
}

impl Connectivity {
    /// Neighbour offsets that precede a voxel in x-fastest scan order.
    fn backward_offsets(self) -> Vec<[isize; 3]> {
        match self {
            Connectivity::Six => vec![[-1, 0, 0], [0, -1, 0], [0, 0, -1]],
            Connectivity::TwentySix => {
                let mut v = Vec::with_capacity(13);
                for dz in -1..=1isize {
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            if (dz, dy, dx) < (0, 0, 0) {
                                v.push([dx, dy, dz]);
                            }
                        }
                    }
                }
                v
            }
        }
    }
}

/// Disjoint-set forest over voxel indices.
struct UnionFind {
    parent: Vec<u32>,
    size: Vec<u32>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
            size: vec![1; n],
        }
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        let (big, small) = if self.size[ra as usize] >= self.size[rb as usize] {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[small as usize] = big;
        self.size[big as usize] += self.size[small as usize];
    }
}

/// Component labeling: 0 is background, ids 1..=K in first-encounter scan
/// order (x fastest, then y, then z).
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentMap {
    labels: Volume<u32>,
    sizes: Vec<usize>,
}

impl ComponentMap {
    pub fn labels(&self) -> &Volume<u32> {
        &self.labels
    }

    /// Voxel counts; entry `i` belongs to component id `i + 1`.
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn count(&self) -> usize {
        self.sizes.len()
    }

    pub fn size(&self, id: u32) -> usize {
        self.sizes[id as usize - 1]
    }

    /// Id of the largest component, lowest id on ties.
    pub fn largest(&self) -> Option<u32> {
        let mut best: Option<(u32, usize)> = None;
        for (i, &s) in self.sizes.iter().enumerate() {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i as u32 + 1, s));
            }
        }
        best.map(|(id, _)| id)
    }
}

pub fn connected_components(mask: &Volume<u8>, connectivity: Connectivity) -> Result<ComponentMap> {
    mask.check_binary()?;
    let d = mask.dims();
    let (nx, ny, nz) = (d.nx() as isize, d.ny() as isize, d.nz() as isize);
    let data = mask.data();
    let offsets = connectivity.backward_offsets();
    let mut uf = UnionFind::new(data.len());

    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = d.index(x as usize, y as usize, z as usize);
                if data[i] == 0 {
                    continue;
                }
                for &[dx, dy, dz] in &offsets {
                    let (qx, qy, qz) = (x + dx, y + dy, z + dz);
                    if qx < 0 || qy < 0 || qz < 0 || qx >= nx || qy >= ny || qz >= nz {
                        continue;
                    }
                    let j = d.index(qx as usize, qy as usize, qz as usize);
                    if data[j] != 0 {
                        uf.union(i as u32, j as u32);
                    }
                }
            }
        }
    }

    // Relabel roots in scan order.
    let mut root_id = vec![0u32; data.len()];
    let mut sizes = Vec::new();
    let mut labels = vec![0u32; data.len()];
    for i in 0..data.len() {
        if data[i] == 0 {
            continue;
        }
        let r = uf.find(i as u32) as usize;
        if root_id[r] == 0 {
            sizes.push(0);
            root_id[r] = sizes.len() as u32;
        }
        let id = root_id[r];
        labels[i] = id;
        sizes[id as usize - 1] += 1;
    }
    Ok(ComponentMap {
        labels: mask.with_data(labels)?,
        sizes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessParams {
    /// Classes reduced to their largest component. Tumor is left out by
    /// default since several lesions can coexist.
    pub classes: ClassSet,
    pub connectivity: Connectivity,
}

impl Default for PostprocessParams {
    fn default() -> Self {
        PostprocessParams {
            classes: ClassSet::ORGANS,
            connectivity: Connectivity::TwentySix,
        }
    }
}

/// For each listed class, voxels outside its largest connected component
/// become background. Other classes are untouched.
pub fn keep_largest(map: &LabelMap, classes: ClassSet, connectivity: Connectivity) -> LabelMap {
    let present = map.histogram();
    let targets: Vec<u8> = classes.iter().filter(|&c| present[c as usize] > 0).collect();

    let removals: Vec<Vec<usize>> = targets
        .par_iter()
        .map(|&class| {
            let cc = connected_components(&map.binarize(class), connectivity).expect("binarized mask is binary");
            let keep = cc.largest().unwrap_or(0);
            cc.labels()
                .data()
                .iter()
                .enumerate()
                .filter(|&(_, &id)| id != 0 && id != keep)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();

    let mut data = map.data().to_vec();
    for idx in removals.into_iter().flatten() {
        data[idx] = 0;
    }
    map.with_labels(data).expect("values only cleared")
}
