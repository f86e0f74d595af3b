//! Cell-wise region growing seeded from the dominant histogram bin.

use std::collections::VecDeque;

use crate::cell_grid::{CellGrid, CellStats};
use crate::error::{Error, Result};
use crate::histogram::NormalHistogram;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrowConfig {
    /// Minimum normal dot product between a cell and the cell expanding it.
    pub t_n: f64,
    /// Growing stops once the dominant bin holds fewer cells.
    pub k1: usize,
    /// Segments with fewer cells are dropped.
    pub k2: usize,
    /// Upper bound on the adaptive point-to-plane threshold (meters).
    pub td_cap: f64,
}

impl Default for GrowConfig {
    fn default() -> Self {
        Self {
            t_n: (std::f64::consts::PI / 12.0).cos(),
            k1: 5,
            k2: 5,
            td_cap: 0.1,
        }
    }
}

impl GrowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_n > 0.0 && self.t_n < 1.0) {
            return Err(Error::InvalidInput(format!("T_N must lie in (0, 1), got {}", self.t_n)));
        }
        if self.k1 == 0 || self.k2 == 0 {
            return Err(Error::InvalidInput("k1 and k2 must be at least 1".into()));
        }
        if !(self.td_cap > 0.0) {
            return Err(Error::InvalidInput(format!("T_d cap must be positive, got {}", self.td_cap)));
        }
        Ok(())
    }

    /// `min(l·√(1 − T_N²), cap)` for the cell diameter `l`.
    pub fn distance_threshold(&self, cell: &CellStats) -> f64 {
        (cell.diameter * (1.0 - self.t_n * self.t_n).sqrt()).min(self.td_cap)
    }
}

/// 4-connected set of planar cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellSegment {
    /// Grid indices in acceptance order; the seed comes first.
    pub cells: Vec<usize>,
    pub seed: usize,
    /// Grid-sized membership mask.
    pub mask: Vec<bool>,
}

impl CellSegment {
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Breadth-first growth from `seed`. Every accepted cell becomes the local
/// seed for its own neighbors.
pub fn grow_seed(grid: &CellGrid, remaining: &[bool], seed: usize, cfg: &GrowConfig) -> Result<CellSegment> {
    if remaining.len() != grid.len() {
        return Err(Error::ContractViolation("remaining mask does not match grid size".into()));
    }
    if !grid.cells[seed].planar {
        return Err(Error::ContractViolation(format!("seed cell {seed} is not planar")));
    }
    if !remaining[seed] {
        return Err(Error::ContractViolation(format!("seed cell {seed} is not in the remaining set")));
    }
    let mut mask = vec![false; grid.len()];
    let mut cells = vec![seed];
    mask[seed] = true;
    let mut queue = VecDeque::from([seed]);
    while let Some(s) = queue.pop_front() {
        let sc = &grid.cells[s];
        let td = cfg.distance_threshold(sc);
        for c in grid.neighbors4(s) {
            if mask[c] || !remaining[c] {
                continue;
            }
            let cc = &grid.cells[c];
            if !cc.planar || cc.normal.dot(&sc.normal) <= cfg.t_n {
                continue;
            }
            if (sc.normal.dot(&cc.centroid) + sc.d).abs() >= td {
                continue;
            }
            mask[c] = true;
            cells.push(c);
            queue.push_back(c);
        }
    }
    Ok(CellSegment { cells, seed, mask })
}

/// Grows segments until the dominant bin holds fewer than `k1` cells.
/// Consumes the histogram's tracked cells as they are grown.
pub fn grow_all(grid: &CellGrid, hist: &mut NormalHistogram, cfg: &GrowConfig) -> Result<Vec<CellSegment>> {
    cfg.validate()?;
    let mut remaining = vec![false; grid.len()];
    for (i, r) in remaining.iter_mut().enumerate() {
        *r = hist.bin_of_cell(i).is_some();
    }
    let mut segments = Vec::new();
    loop {
        let bin = hist.most_frequent_bin();
        if bin.is_empty() || bin.len() < cfg.k1 {
            break;
        }
        let seed = *bin
            .iter()
            .min_by(|&&a, &&b| grid.cells[a].mse.total_cmp(&grid.cells[b].mse).then(a.cmp(&b)))
            .expect("bin is non-empty");
        let seg = grow_seed(grid, &remaining, seed, cfg)?;
        for &c in &seg.cells {
            remaining[c] = false;
        }
        hist.remove_cells(&seg.cells)?;
        if seg.len() >= cfg.k2 {
            segments.push(seg);
        }
    }
    Ok(segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell_grid::{build_grid, CellGridConfig};
    use crate::cloud::{backproject, Intrinsics, OrganizedCloud};
    use crate::histogram::HistogramConfig;
    use crate::scene::{render_scene, NoiseModel, ScenePrimitive};
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn cloud_of(prims: &[ScenePrimitive], w: usize, h: usize) -> OrganizedCloud {
        let intr = Intrinsics::new(525.0, 525.0, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, 0.001).unwrap();
        let s = render_scene(prims, &intr, (w, h), NoiseModel::None, 0).unwrap();
        backproject(&s.depth, &intr).unwrap()
    }

    fn segment(prims: &[ScenePrimitive], w: usize, h: usize) -> (CellGrid, Vec<CellSegment>) {
        let grid = build_grid(&cloud_of(prims, w, h), &CellGridConfig::default()).unwrap();
        let mut hist = NormalHistogram::from_grid(HistogramConfig::default(), &grid).unwrap();
        let segs = grow_all(&grid, &mut hist, &GrowConfig::default()).unwrap();
        (grid, segs)
    }

    fn is_4_connected(grid: &CellGrid, seg: &CellSegment) -> bool {
        let mut seen = vec![false; grid.len()];
        let mut stack = vec![seg.cells[0]];
        seen[seg.cells[0]] = true;
        let mut n = 1;
        while let Some(c) = stack.pop() {
            for nb in grid.neighbors4(c) {
                if seg.mask[nb] && !seen[nb] {
                    seen[nb] = true;
                    n += 1;
                    stack.push(nb);
                }
            }
        }
        n == seg.len() && seg.mask.iter().filter(|&&m| m).count() == seg.len()
    }

    fn check_invariants(grid: &CellGrid, segs: &[CellSegment], cfg: &GrowConfig) {
        let mut owner = vec![false; grid.len()];
        for s in segs {
            assert!(s.len() >= cfg.k2);
            assert!(is_4_connected(grid, s));
            for &c in &s.cells {
                assert!(grid.cells[c].planar);
                assert!(!owner[c], "cell {c} in two segments");
                owner[c] = true;
            }
        }
    }

    #[test]
    fn single_wall_is_one_segment() {
        let (grid, segs) = segment(&[ScenePrimitive::plane(Vector3::new(0.0, 0.0, -1.0), 2.0)], 320, 240);
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].len(), grid.planar_count());
        assert_eq!(segs[0].len(), grid.len());
    }

    #[test]
    fn perpendicular_walls_give_two_segments() {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let prims = [
            ScenePrimitive::plane(Vector3::new(s, 0.0, -s), 2.0 * s),
            ScenePrimitive::plane(Vector3::new(-s, 0.0, -s), 2.0 * s),
        ];
        let (grid, segs) = segment(&prims, 320, 240);
        assert_eq!(segs.len(), 2);
        check_invariants(&grid, &segs, &GrowConfig::default());
        let dot = grid.cells[segs[0].seed].normal.dot(&grid.cells[segs[1].seed].normal);
        assert!(dot.abs() < 1e-6);
    }

    #[test]
    fn cylinder_surface_grows_as_one_segment() {
        let cyl = ScenePrimitive::cylinder(Vector3::y(), Vector3::new(0.0, 0.0, 2.0), 0.5);
        let (grid, segs) = segment(&[cyl], 640, 480);
        check_invariants(&grid, &segs, &GrowConfig::default());
        // Geometry oracle: cells are 20 px wide; on the ray at column u the
        // surface normal angle is θ(u), and the angle between horizontally
        // adjacent cell centers is |θ(u+20) − θ(u)|.
        let limit = GrowConfig::default().t_n.acos();
        let theta = |u: f64| {
            let x = (u - 319.5) / 525.0;
            let dir = Vector3::new(x, 0.0, 1.0);
            let p = dir * cyl.intersect(&dir)?;
            Some(p.x.atan2(2.0 - p.z))
        };
        let step_ok = |a: f64, b: f64| match (theta(a), theta(b)) {
            (Some(x), Some(y)) => (x - y).abs() < 0.8 * limit,
            _ => false,
        };
        let central: Vec<usize> = (0..grid.cols)
            .filter(|&c| {
                let uc = c as f64 * 20.0 + 10.0;
                let left = step_ok(uc, uc - 20.0);
                let right = step_ok(uc + 20.0, uc);
                left && right && grid.cells[grid.index(12, c)].planar
            })
            .collect();
        assert!(central.len() >= 10);
        let main = &segs[0];
        for r in 0..grid.rows {
            for &c in &central {
                let i = grid.index(r, c);
                if grid.cells[i].planar {
                    assert!(main.mask[i], "cell ({r},{c}) outside the main segment");
                }
            }
        }
    }

    #[test]
    fn stray_cells_left_unsegmented() {
        let grid = build_grid(
            &cloud_of(&[ScenePrimitive::plane(Vector3::new(0.0, 0.0, -1.0), 2.0)], 200, 200),
            &CellGridConfig::default(),
        )
        .unwrap();
        // Only three cells tracked: the dominant bin is below k1.
        let mut hist = NormalHistogram::build(
            HistogramConfig::default(),
            [0usize, 1, 2].map(|i| (i, grid.cells[i].normal)),
        )
        .unwrap();
        let segs = grow_all(&grid, &mut hist, &GrowConfig::default()).unwrap();
        assert!(segs.is_empty());
        assert_eq!(hist.total(), 3);
    }

    #[test]
    fn small_segment_dropped_but_removed() {
        let mut grid = build_grid(
            &cloud_of(&[ScenePrimitive::plane(Vector3::new(0.0, 0.0, -1.0), 2.0)], 200, 200),
            &CellGridConfig::default(),
        )
        .unwrap();
        // Keep a 2×2 block planar.
        let keep = [0usize, 1, 10, 11];
        for (i, c) in grid.cells.iter_mut().enumerate() {
            if !keep.contains(&i) {
                c.planar = false;
            }
        }
        let cfg = GrowConfig { k1: 4, ..Default::default() };
        let mut hist = NormalHistogram::from_grid(HistogramConfig::default(), &grid).unwrap();
        let segs = grow_all(&grid, &mut hist, &cfg).unwrap();
        assert!(segs.is_empty());
        assert!(hist.is_empty());
    }

    #[test]
    fn non_planar_seed_rejected() {
        let cloud = cloud_of(&[], 40, 40);
        let grid = build_grid(&cloud, &CellGridConfig::default()).unwrap();
        let remaining = vec![true; grid.len()];
        assert!(matches!(
            grow_seed(&grid, &remaining, 0, &GrowConfig::default()),
            Err(Error::ContractViolation(_))
        ));
    }

    #[test]
    fn threshold_grows_with_depth_until_cap() {
        let cfg = GrowConfig::default();
        let mut last = 0.0;
        let mut capped = false;
        for z in [0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 40.0] {
            let grid = build_grid(
                &cloud_of(&[ScenePrimitive::plane(Vector3::new(0.0, 0.0, -1.0), z)], 40, 40),
                &CellGridConfig { epsilon: 10.0, ..Default::default() },
            )
            .unwrap();
            let td = cfg.distance_threshold(&grid.cells[0]);
            assert!(td >= last);
            if td == cfg.td_cap {
                capped = true;
            } else {
                assert!(td > last);
            }
            last = td;
        }
        assert!(capped);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn segments_disjoint_connected_planar(
            z1 in 1.0f64..3.0, z2 in 1.0f64..3.0,
            ax in -0.6f64..0.6, r in 0.3f64..1.2,
        ) {
            let prims = [
                ScenePrimitive::plane(Vector3::new(ax, 0.2, -1.0), z1 + 1.5),
                ScenePrimitive::cylinder(Vector3::new(0.0, 1.0, 0.2), Vector3::new(ax, 0.0, z2 + 0.5), r),
            ];
            let (grid, segs) = segment(&prims, 320, 240);
            check_invariants(&grid, &segs, &GrowConfig::default());
        }
    }
}
