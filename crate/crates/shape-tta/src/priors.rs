//! Descriptor priors: the coarse class-ratio prior, per-class presence
//! thresholds, self-estimated moment priors, weak image-level tags, and the
//! inverse-ratio class weights.
//!
//! Moment priors are re-estimated from hard argmax masks between epochs and
//! are constants inside an epoch's loss; no gradients flow through them.

use crate::error::{Error, Result};
use crate::moments::hard;

/// Log clamp shared by entropy/KL terms and the weight formula.
pub const EPS_LOG: f64 = 1e-12;

/// Which self-estimated moment descriptor a mode constrains.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentDescriptor {
    Centroid,
    DistToCentroid,
}

/// Per-slice, per-class presence tags (weak supervision). Class 0
/// (background) is always present; tags cover foreground structures.
#[derive(Debug, Clone, Default)]
pub struct SliceTags {
    /// present[slice][class]
    present: Vec<Vec<bool>>,
}

impl SliceTags {
    pub fn new(present: Vec<Vec<bool>>) -> Self {
        SliceTags { present }
    }

    pub fn is_present(&self, slice: usize, class: usize) -> bool {
        if class == 0 {
            return true;
        }
        self.present
            .get(slice)
            .and_then(|row| row.get(class))
            .copied()
            .unwrap_or(true)
    }

    /// True when the class is tagged absent in every slice.
    pub fn absent_everywhere(&self, class: usize, n_slices: usize) -> bool {
        (0..n_slices).all(|s| !self.is_present(s, class))
    }
}

/// Target descriptor values guiding one adaptation run.
#[derive(Debug, Clone)]
pub struct DescriptorPrior {
    /// Normalized class-ratio prior over all K classes.
    pub ratio: Vec<f64>,
    /// Per-class presence thresholds (fraction of slice area).
    pub epsilon: Vec<f64>,
    /// Self-estimated centroid prior per class; `None` while no slice qualifies.
    pub centroid: Vec<Option<[f64; 2]>>,
    /// Self-estimated distance-to-centroid prior per class.
    pub spread: Vec<Option<[f64; 2]>>,
    /// Optional weak tags; `None` means every class present in every slice.
    pub tags: Option<SliceTags>,
}

impl DescriptorPrior {
    pub fn from_coarse_ratios(coarse: &[f64]) -> Result<Self> {
        let (ratio, epsilon) = load_ratio_prior(coarse)?;
        let k = ratio.len();
        Ok(DescriptorPrior {
            ratio,
            epsilon,
            centroid: vec![None; k],
            spread: vec![None; k],
            tags: None,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.ratio.len()
    }

    pub fn is_tagged_present(&self, slice: usize, class: usize) -> bool {
        self.tags.as_ref().map(|t| t.is_present(slice, class)).unwrap_or(true)
    }

    /// Class-ratio prior effective for one slice: tagged-absent classes are
    /// zeroed and the remainder re-normalized.
    pub fn effective_ratio(&self, slice: usize) -> Vec<f64> {
        let Some(tags) = &self.tags else {
            return self.ratio.clone();
        };
        let mut eff = self.ratio.clone();
        let mut changed = false;
        for (k, r) in eff.iter_mut().enumerate() {
            if !tags.is_present(slice, k) {
                *r = 0.0;
                changed = true;
            }
        }
        if changed {
            let sum: f64 = eff.iter().sum();
            if sum > 0.0 {
                for r in &mut eff {
                    *r /= sum;
                }
            }
        }
        eff
    }

    pub fn moment(&self, descriptor: MomentDescriptor, class: usize) -> Option<[f64; 2]> {
        match descriptor {
            MomentDescriptor::Centroid => self.centroid[class],
            MomentDescriptor::DistToCentroid => self.spread[class],
        }
    }

    /// Replace both moment priors with estimates from the given argmax masks.
    pub fn reestimate_moments(&mut self, labels: &[u8], n: usize, h: usize, w: usize) {
        self.centroid = estimate_moment_prior(
            labels,
            n,
            h,
            w,
            self.num_classes(),
            MomentDescriptor::Centroid,
            &self.epsilon,
        );
        self.spread = estimate_moment_prior(
            labels,
            n,
            h,
            w,
            self.num_classes(),
            MomentDescriptor::DistToCentroid,
            &self.epsilon,
        );
    }
}

/// Normalize coarse per-class ratios into a simplex prior and derive the
/// presence thresholds eps^k = max(1e-3, 0.1 * ratio_k).
pub fn load_ratio_prior(coarse: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if coarse.is_empty() {
        return Err(Error::Config("ratio prior must not be empty".into()));
    }
    if let Some(neg) = coarse.iter().find(|r| **r < 0.0) {
        return Err(Error::Config(format!("ratio prior entries must be non-negative, got {}", neg)));
    }
    let sum: f64 = coarse.iter().sum();
    if sum <= 0.0 {
        return Err(Error::Config("ratio prior must have positive mass".into()));
    }
    let ratio: Vec<f64> = coarse.iter().map(|r| r / sum).collect();
    let epsilon: Vec<f64> = ratio.iter().map(|r| (0.1 * r).max(1e-3)).collect();
    Ok((ratio, epsilon))
}

/// Inverse-ratio class weights: nu_k = ratio_k^-1 / sum_j ratio_j^-1.
///
/// Classes flagged in `excluded` (tagged absent for the whole subject) are
/// dropped from the formula and the rest re-normalized.
pub fn compute_class_weights(ratio: &[f64], excluded: Option<&[bool]>) -> Vec<f64> {
    let inv: Vec<f64> = ratio
        .iter()
        .enumerate()
        .map(|(k, r)| {
            if excluded.map(|e| e[k]).unwrap_or(false) {
                0.0
            } else {
                1.0 / r.max(EPS_LOG)
            }
        })
        .collect();
    let sum: f64 = inv.iter().sum();
    inv.iter().map(|v| v / sum).collect()
}

/// Mean descriptor over the slices where the class occupies more than
/// eps^k of the area in the hard mask; `None` when no slice qualifies.
pub fn estimate_moment_prior(
    labels: &[u8],
    n: usize,
    h: usize,
    w: usize,
    num_classes: usize,
    descriptor: MomentDescriptor,
    epsilon: &[f64],
) -> Vec<Option<[f64; 2]>> {
    let plane = h * w;
    let mut sums = vec![[0.0f64; 2]; num_classes];
    let mut counts = vec![0usize; num_classes];
    let mut map = vec![0.0f64; plane];
    for slice in 0..n {
        let lab = &labels[slice * plane..(slice + 1) * plane];
        for k in 0..num_classes {
            let mut mass = 0usize;
            for (m, l) in map.iter_mut().zip(lab.iter()) {
                if *l as usize == k {
                    *m = 1.0;
                    mass += 1;
                } else {
                    *m = 0.0;
                }
            }
            if (mass as f64) / (plane as f64) <= epsilon[k] {
                continue;
            }
            let d = match descriptor {
                MomentDescriptor::Centroid => hard::centroid(&map, h, w),
                MomentDescriptor::DistToCentroid => hard::dist_to_centroid(&map, h, w),
            };
            sums[k][0] += d[0];
            sums[k][1] += d[1];
            counts[k] += 1;
        }
    }
    (0..num_classes)
        .map(|k| {
            if counts[k] == 0 {
                None
            } else {
                Some([sums[k][0] / counts[k] as f64, sums[k][1] / counts[k] as f64])
            }
        })
        .collect()
}
