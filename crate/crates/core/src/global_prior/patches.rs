//! Two-channel intensity patches and their augmentation.
//!
//! Channel 0 is the patch min-max normalized on its own (all 0.5 when the
//! patch is constant); channel 1 is the raw patch divided by the image
//! maximum. Data are stored row-major with the two channels interleaved.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Plane, SamplingMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// Centred on an LR sample.
    Sampled,
    /// One of the 8 HR neighbours of a sampled position, carrying its label.
    NeighborAugmented,
    /// Centred on an HR pixel, for prediction.
    Unlabeled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: Source,
    /// Dihedral variant: `variant % 4` quarter turns, then a mirror if `>= 4`.
    pub variant: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub data: Vec<f64>,
    pub label: Option<f64>,
    /// HR pixel at the patch centre.
    pub origin: (usize, usize),
    pub provenance: Provenance,
}

/// Patches plus the image they were cut from (needed for neighbour
/// augmentation).
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub side: usize,
    pub edge_margin: usize,
    pub patches: Vec<Patch>,
    image: Array2<f64>,
    image_max: f64,
}

impl PatchSet {
    pub fn labeled(&self) -> impl Iterator<Item = &Patch> {
        self.patches.iter().filter(|p| p.label.is_some())
    }

    pub fn unlabeled(&self) -> impl Iterator<Item = &Patch> {
        self.patches.iter().filter(|p| p.label.is_none())
    }

    pub fn hr_shape(&self) -> (usize, usize) {
        self.image.dim()
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Same source image with a different patch list.
    pub fn with_patches(&self, patches: Vec<Patch>) -> PatchSet {
        PatchSet {
            side: self.side,
            edge_margin: self.edge_margin,
            patches,
            image: self.image.clone(),
            image_max: self.image_max,
        }
    }

    /// Cuts the patch centred at `(r, c)`, replicating edge pixels where the
    /// patch leaves the image.
    pub fn cut(&self, r: usize, c: usize) -> Vec<f64> {
        cut_patch(&self.image, self.image_max, self.side, r, c)
    }

    /// Whether an HR pixel is at least `edge_margin` away from every border.
    pub fn in_bounds(&self, r: usize, c: usize) -> bool {
        in_bounds(self.image.dim(), self.edge_margin, r, c)
    }
}

fn in_bounds(shape: (usize, usize), margin: usize, r: usize, c: usize) -> bool {
    r >= margin && c >= margin && r + margin < shape.0 && c + margin < shape.1
}

fn cut_patch(image: &Array2<f64>, image_max: f64, side: usize, r: usize, c: usize) -> Vec<f64> {
    let (rows, cols) = image.dim();
    let half = (side / 2) as isize;
    let mut raw = Vec::with_capacity(side * side);
    for dy in -half..=half {
        let y = (r as isize + dy).clamp(0, rows as isize - 1) as usize;
        for dx in -half..=half {
            let x = (c as isize + dx).clamp(0, cols as isize - 1) as usize;
            raw.push(image[[y, x]]);
        }
    }
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut data = Vec::with_capacity(2 * side * side);
    for &v in &raw {
        data.push(if hi > lo { (v - lo) / (hi - lo) } else { 0.5 });
        data.push(if image_max > 0.0 { v / image_max } else { 0.0 });
    }
    data
}

/// One labeled patch per in-bounds, sampled LR position and one unlabeled
/// patch per in-bounds HR pixel.
pub fn extract_patches(
    hr_intensity: &Plane,
    lr_tau: &Plane,
    map: &SamplingMap,
    side: usize,
    edge_margin: usize,
) -> Result<PatchSet> {
    if side % 2 == 0 || side == 0 {
        return Err(Error::InvalidConfig(format!(
            "patch side must be odd, got {side}"
        )));
    }
    if hr_intensity.shape() != map.hr_shape() {
        let (a, b) = (map.hr_shape(), hr_intensity.shape());
        return Err(Error::shape(&[a.0, a.1], &[b.0, b.1]));
    }
    if lr_tau.shape() != map.lr_shape() {
        let (a, b) = (map.lr_shape(), lr_tau.shape());
        return Err(Error::shape(&[a.0, a.1], &[b.0, b.1]));
    }
    let image = hr_intensity.values().clone();
    let image_max = image.iter().cloned().fold(0.0, f64::max);
    let shape = image.dim();
    let mut patches = Vec::new();
    for ((i, j), &tau) in lr_tau.values().indexed_iter() {
        let (r, c) = map.hr_position(i, j);
        if tau.is_nan() || !in_bounds(shape, edge_margin, r, c) {
            continue;
        }
        patches.push(Patch {
            data: cut_patch(&image, image_max, side, r, c),
            label: Some(tau),
            origin: (r, c),
            provenance: Provenance {
                source: Source::Sampled,
                variant: 0,
            },
        });
    }
    if patches.is_empty() {
        return Err(Error::NoLabeledPatches);
    }
    for r in 0..shape.0 {
        for c in 0..shape.1 {
            if in_bounds(shape, edge_margin, r, c) {
                patches.push(Patch {
                    data: cut_patch(&image, image_max, side, r, c),
                    label: None,
                    origin: (r, c),
                    provenance: Provenance {
                        source: Source::Unlabeled,
                        variant: 0,
                    },
                });
            }
        }
    }
    Ok(PatchSet {
        side,
        edge_margin,
        patches,
        image,
        image_max,
    })
}

/// Applies dihedral variant `k` (0..8) to interleaved two-channel data.
pub fn dihedral(data: &[f64], side: usize, k: u8) -> Vec<f64> {
    let n = side;
    let mut out = vec![0.0; data.len()];
    for y in 0..n {
        for x in 0..n {
            // undo the mirror, then the quarter turns
            let (mut sy, mut sx) = if k >= 4 { (y, n - 1 - x) } else { (y, x) };
            for _ in 0..(k % 4) {
                // inverse of a counter-clockwise quarter turn
                let (ty, tx) = (sx, n - 1 - sy);
                sy = ty;
                sx = tx;
            }
            let (dst, src) = (2 * (y * n + x), 2 * (sy * n + sx));
            out[dst] = data[src];
            out[dst + 1] = data[src + 1];
        }
    }
    out
}

/// Training instances from the labeled patches: optional neighbour patches,
/// then all 8 dihedral variants of each. No deduplication.
pub fn augment(set: &PatchSet, neighbor_augment: bool) -> Result<PatchSet> {
    let mut out = Vec::new();
    for p in set
        .labeled()
        .filter(|p| p.provenance.source == Source::Sampled)
    {
        let mut bases = vec![(p.data.clone(), p.origin, Source::Sampled)];
        if neighbor_augment {
            let (rows, cols) = set.hr_shape();
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    if dy == 0 && dx == 0 {
                        continue;
                    }
                    let r = (p.origin.0 as isize + dy).clamp(0, rows as isize - 1) as usize;
                    let c = (p.origin.1 as isize + dx).clamp(0, cols as isize - 1) as usize;
                    bases.push((set.cut(r, c), (r, c), Source::NeighborAugmented));
                }
            }
        }
        for (data, origin, source) in bases {
            for k in 0..8u8 {
                out.push(Patch {
                    data: dihedral(&data, set.side, k),
                    label: p.label,
                    origin,
                    provenance: Provenance { source, variant: k },
                });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::NoLabeledPatches);
    }
    Ok(set.with_patches(out))
}
