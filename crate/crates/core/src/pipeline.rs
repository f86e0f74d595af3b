//! End-to-end extraction: cell grid, normal histogram, region growing, model
//! fitting, boundary refinement and probabilistic cylinder refinement.

use std::time::{Duration, Instant};

use nalgebra::Vector3;

use crate::cell_grid::{build_grid, CellGridConfig};
use crate::cloud::OrganizedCloud;
use crate::error::Result;
use crate::fitting::{fit_segments, merge_coplanar_segments, outlier_bound, refit_plane_pixels, FitConfig, Primitive};
use crate::histogram::{HistogramConfig, NormalHistogram};
use crate::odometry::{CylinderFeature, Frame, PlaneFeature};
use crate::prob_cylinder::{refine_cylinder, subsample_grid, ProbCylinderConfig};
use crate::records::PrimitiveRecord;
use crate::refinement::{refine_all, RefineConfig, SegmentLabelImage};
use crate::region_growing::{grow_all, GrowConfig};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ExtractConfig {
    pub cells: CellGridConfig,
    pub histogram: HistogramConfig,
    pub grow: GrowConfig,
    pub fit: FitConfig,
    pub refine: RefineConfig,
    pub cylinder: ProbCylinderConfig,
    /// Skip the probabilistic cylinder refit; cylinders then carry no uncertainty.
    pub skip_cylinder_refinement: bool,
}

impl ExtractConfig {
    pub fn with_patch(mut self, patch: usize) -> Self {
        self.cells.patch_size = patch;
        self
    }

    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.cells.parallel = parallel;
        self.fit.parallel = parallel;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.grow.validate()?;
        self.fit.validate()?;
        self.refine.validate()
    }
}

const CYLINDER_TRIM_ROUNDS: usize = 5;

pub const STAGES: [&str; 5] = ["cell_fit", "histogram", "growing", "fitting", "refinement"];

/// Per-stage wall time of one extraction. `refinement` covers both the
/// boundary pass and the cylinder refit.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimings {
    pub stages: [Duration; 5],
    pub total: Duration,
}

impl StageTimings {
    pub fn micros(&self) -> [f64; 6] {
        let us = |d: Duration| d.as_secs_f64() * 1e6;
        let s = &self.stages;
        [us(s[0]), us(s[1]), us(s[2]), us(s[3]), us(s[4]), us(self.total)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
}

/// Nearest-rank percentiles over `samples`; `None` when empty.
pub fn summarize(samples: &[f64]) -> Option<Summary> {
    if samples.is_empty() {
        return None;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = |q: f64| s[((q * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
    Some(Summary {
        mean: s.iter().sum::<f64>() / s.len() as f64,
        p50: rank(0.5),
        p95: rank(0.95),
        max: s[s.len() - 1],
    })
}

/// Plain-text report, one `name mean p50 p95 max` line (microseconds) per
/// stage and one for the total.
pub fn timing_report(runs: &[StageTimings]) -> String {
    let mut out = String::new();
    let names = STAGES.iter().copied().chain(["total"]);
    for (k, name) in names.enumerate() {
        let col: Vec<f64> = runs.iter().map(|t| t.micros()[k]).collect();
        if let Some(s) = summarize(&col) {
            out.push_str(&format!("{name} {:.3} {:.3} {:.3} {:.3}\n", s.mean, s.p50, s.p95, s.max));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    /// Label `k` in `labels` is `primitives[k − 1]`.
    pub primitives: Vec<Primitive>,
    pub labels: SegmentLabelImage,
    pub pixel_counts: Vec<usize>,
    pub timings: StageTimings,
    pub planar_cells: usize,
    pub segments: usize,
}

impl Extraction {
    pub fn records(&self, cfg: &ExtractConfig) -> Vec<PrimitiveRecord> {
        self.primitives
            .iter()
            .enumerate()
            .map(|(k, p)| PrimitiveRecord::from_primitive(k as u32 + 1, p, self.pixel_counts[k], &cfg.cells.noise))
            .collect()
    }

    /// Odometry features; cylinders without uncertainty are left out.
    pub fn frame(&self, cfg: &ExtractConfig) -> Frame {
        let mut planes = Vec::new();
        let mut cylinders = Vec::new();
        for (k, p) in self.primitives.iter().enumerate() {
            let label = k as u32 + 1;
            match p {
                Primitive::Plane(m) => planes.push(PlaneFeature::from_model(label, m, m.parameter_covariance(&cfg.cells.noise))),
                Primitive::Cylinder(m) => {
                    if let Ok(f) = CylinderFeature::from_model(label, m) {
                        cylinders.push(f);
                    }
                }
            }
        }
        Frame {
            planes,
            cylinders,
            labels: self.labels.clone(),
        }
    }
}

/// Runs the full pipeline on one organized cloud. Deterministic for a given
/// configuration, serial or parallel.
pub fn extract(cloud: &OrganizedCloud, cfg: &ExtractConfig) -> Result<Extraction> {
    cfg.validate()?;
    let start = Instant::now();
    let mut stages = [Duration::ZERO; 5];
    let mut lap = Instant::now();
    let mut tick = |k: usize| {
        stages[k] = lap.elapsed();
        lap = Instant::now();
    };

    let grid = build_grid(cloud, &cfg.cells)?;
    tick(0);
    let mut hist = NormalHistogram::from_grid(cfg.histogram, &grid)?;
    tick(1);
    let segments = grow_all(&grid, &mut hist, &cfg.grow)?;
    tick(2);
    let fits = fit_segments(&grid, cloud, &segments, &cfg.fit)?;
    let mut planes = Vec::new();
    let mut cylinders = Vec::new();
    for f in fits {
        planes.extend(f.planes);
        cylinders.extend(f.cylinders);
    }
    let planes = merge_coplanar_segments(planes, &grid, &cfg.fit);
    let prims: Vec<Primitive> = planes
        .into_iter()
        .map(|p| Primitive::Plane(refit_plane_pixels(p, &grid, cloud)))
        .chain(cylinders.into_iter().map(Primitive::Cylinder))
        .collect();
    tick(3);
    let refined = refine_all(prims, &grid, cloud, &cfg.refine)?;
    let labels = refined.labels;
    let mut primitives = refined.primitives;
    if !cfg.skip_cylinder_refinement {
        let mut pixels: Vec<Vec<(usize, usize)>> = vec![Vec::new(); primitives.len()];
        for (idx, &l) in labels.labels.iter().enumerate() {
            if l > 0 && matches!(primitives[l as usize - 1], Primitive::Cylinder(_)) {
                pixels[l as usize - 1].push((idx % labels.width, idx / labels.width));
            }
        }
        for (k, prim) in primitives.iter_mut().enumerate() {
            let Primitive::Cylinder(model) = prim else { continue };
            let points: Vec<Vector3<f64>> = subsample_grid(&pixels[k], cfg.cylinder.subsample_step)
                .into_iter()
                .map(|(u, v)| cloud.points[cloud.index(u, v)])
                .collect();
            if points.is_empty() {
                continue;
            }
            // Each round keeps the points within the outlier bound of the
            // latest model and refits from it; a failed first refit keeps the
            // direct model without uncertainty.
            let mut kept: Vec<bool> = Vec::new();
            for _ in 0..CYLINDER_TRIM_ROUNDS {
                let res: Vec<f64> = points.iter().map(|p| model.distance(p)).collect();
                let bound = outlier_bound(&res, 1e-9 * model.radius);
                let sel: Vec<bool> = res.iter().map(|&e| e <= bound).collect();
                if sel == kept {
                    break;
                }
                let subset: Vec<Vector3<f64>> = points.iter().zip(&sel).filter(|(_, &k)| k).map(|(p, _)| *p).collect();
                match refine_cylinder(model, &subset, &cfg.cylinder) {
                    Ok(r) => *model = r.model,
                    Err(_) => break,
                }
                kept = sel;
            }
        }
    }
    tick(4);
    let pixel_counts = labels.counts(primitives.len());
    Ok(Extraction {
        primitives,
        labels,
        pixel_counts,
        timings: StageTimings {
            stages,
            total: start.elapsed(),
        },
        planar_cells: grid.planar_count(),
        segments: segments.len(),
    })
}
