//! Gated, greedy one-to-one association of primitives across two frames.

use std::collections::BTreeMap;

use super::{CylinderFeature, PlaneFeature};
use crate::error::{Error, Result};
use crate::refinement::SegmentLabelImage;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchConfig {
    /// Upper bound on the unsigned angle between cylinder axes (radians).
    pub max_axis_angle: f64,
    /// Upper bound on `(r₁ − r₂)² / (σ²_r₁ + σ²_r₂)`.
    pub max_radius_mahalanobis: f64,
    /// Pixel overlap must exceed this fraction of the smaller segment.
    pub min_overlap_ratio: f64,
    /// Upper bound on the angle between plane normals (radians).
    pub max_normal_angle: f64,
    /// Upper bound on `|d₁ − d₂|` (meters).
    pub max_plane_offset: f64,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            max_axis_angle: std::f64::consts::FRAC_PI_6,
            max_radius_mahalanobis: 2000.0,
            min_overlap_ratio: 0.5,
            max_normal_angle: std::f64::consts::FRAC_PI_6,
            max_plane_offset: 0.2,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.max_axis_angle,
            self.max_radius_mahalanobis,
            self.min_overlap_ratio,
            self.max_normal_angle,
            self.max_plane_offset,
        ];
        if all.iter().all(|&x| x > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidInput("match thresholds must be positive".into()))
        }
    }
}

/// Pixel co-occurrence of labels between two same-sized label images.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overlap {
    pairs: BTreeMap<(u32, u32), usize>,
    prev_sizes: BTreeMap<u32, usize>,
    curr_sizes: BTreeMap<u32, usize>,
}

impl Overlap {
    pub fn between(prev: &SegmentLabelImage, curr: &SegmentLabelImage) -> Result<Self> {
        if prev.width != curr.width || prev.height != curr.height {
            return Err(Error::InvalidInput(format!(
                "label images differ in size: {}x{} vs {}x{}",
                prev.width, prev.height, curr.width, curr.height
            )));
        }
        let mut out = Self::default();
        for (&a, &b) in prev.labels.iter().zip(&curr.labels) {
            if a > 0 {
                *out.prev_sizes.entry(a).or_default() += 1;
            }
            if b > 0 {
                *out.curr_sizes.entry(b).or_default() += 1;
            }
            if a > 0 && b > 0 {
                *out.pairs.entry((a, b)).or_default() += 1;
            }
        }
        Ok(out)
    }

    pub fn get(&self, prev: u32, curr: u32) -> usize {
        self.pairs.get(&(prev, curr)).copied().unwrap_or(0)
    }

    pub fn prev_size(&self, label: u32) -> usize {
        self.prev_sizes.get(&label).copied().unwrap_or(0)
    }

    pub fn curr_size(&self, label: u32) -> usize {
        self.curr_sizes.get(&label).copied().unwrap_or(0)
    }

    /// Overlap when it exceeds `ratio · min(|prev|, |curr|)`.
    fn passing(&self, prev: u32, curr: u32, ratio: f64) -> Option<usize> {
        let o = self.get(prev, curr);
        let min = self.prev_size(prev).min(self.curr_size(curr));
        (o > 0 && o as f64 > ratio * min as f64).then_some(o)
    }
}

/// Highest overlap first, ties by `(prev, curr)`; output sorted by `prev`.
fn greedy(mut cands: Vec<(usize, usize, usize)>) -> Vec<(usize, usize)> {
    cands.sort_by(|x, y| y.0.cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
    let mut used_prev = std::collections::BTreeSet::new();
    let mut used_curr = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for (_, i, j) in cands {
        if used_prev.contains(&i) || used_curr.contains(&j) {
            continue;
        }
        used_prev.insert(i);
        used_curr.insert(j);
        out.push((i, j));
    }
    out.sort_unstable();
    out
}

pub fn cylinders_compatible(a: &CylinderFeature, b: &CylinderFeature, cfg: &MatchConfig) -> bool {
    let cos = a.axis().dot(&b.axis()).abs().min(1.0);
    let var = a.var_r + b.var_r;
    let maha = if var > 0.0 {
        (a.radius - b.radius).powi(2) / var
    } else if a.radius == b.radius {
        0.0
    } else {
        f64::INFINITY
    };
    cos.acos() < cfg.max_axis_angle && maha < cfg.max_radius_mahalanobis
}

pub fn planes_compatible(a: &PlaneFeature, b: &PlaneFeature, cfg: &MatchConfig) -> bool {
    a.normal.dot(&b.normal) > cfg.max_normal_angle.cos() && (a.d - b.d).abs() < cfg.max_plane_offset
}

/// Index pairs `(prev, curr)` of matched cylinders.
pub fn match_cylinders(
    prev: &[CylinderFeature],
    curr: &[CylinderFeature],
    overlap: &Overlap,
    cfg: &MatchConfig,
) -> Vec<(usize, usize)> {
    let mut cands = Vec::new();
    for (i, a) in prev.iter().enumerate() {
        for (j, b) in curr.iter().enumerate() {
            if !cylinders_compatible(a, b, cfg) {
                continue;
            }
            if let Some(o) = overlap.passing(a.label, b.label, cfg.min_overlap_ratio) {
                cands.push((o, i, j));
            }
        }
    }
    greedy(cands)
}

/// Index pairs `(prev, curr)` of matched planes.
pub fn match_planes(prev: &[PlaneFeature], curr: &[PlaneFeature], overlap: &Overlap, cfg: &MatchConfig) -> Vec<(usize, usize)> {
    let mut cands = Vec::new();
    for (i, a) in prev.iter().enumerate() {
        for (j, b) in curr.iter().enumerate() {
            if !planes_compatible(a, b, cfg) {
                continue;
            }
            if let Some(o) = overlap.passing(a.label, b.label, cfg.min_overlap_ratio) {
                cands.push((o, i, j));
            }
        }
    }
    greedy(cands)
}
