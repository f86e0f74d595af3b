//! Pixel-wise boundary refinement inside the band between each primitive's
//! dilated and eroded cell masks.

use crate::cell_grid::CellGrid;
use crate::cloud::{DepthImage, OrganizedCloud};
use crate::error::{Error, Result};
use crate::fitting::Primitive;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    /// Band pixels join primitive `k` only if `dist² < factor · max(MSE_k, mse_floor)`.
    pub factor: f64,
    /// Lower bound on the MSE used in the band test, so noise-free models still accept their own pixels.
    pub mse_floor: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            factor: 9.0,
            mse_floor: 1e-8,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0) || !(self.mse_floor >= 0.0) {
            return Err(Error::InvalidInput("refinement factor must be positive and mse floor non-negative".into()));
        }
        Ok(())
    }
}

/// Cell kept iff it and its in-grid 4-neighbours are all set; cells on the
/// grid border are always removed.
pub fn erode(mask: &[bool], rows: usize, cols: usize) -> Vec<bool> {
    assert_eq!(mask.len(), rows * cols, "mask size must match grid");
    let mut out = vec![false; mask.len()];
    for r in 1..rows.saturating_sub(1) {
        for c in 1..cols.saturating_sub(1) {
            let i = r * cols + c;
            out[i] = mask[i] && mask[i - 1] && mask[i + 1] && mask[i - cols] && mask[i + cols];
        }
    }
    out
}

/// Union of the mask with the 8-neighbourhood of every set cell, clipped to the grid.
pub fn dilate(mask: &[bool], rows: usize, cols: usize) -> Vec<bool> {
    assert_eq!(mask.len(), rows * cols, "mask size must match grid");
    let mut out = vec![false; mask.len()];
    for r in 0..rows {
        for c in 0..cols {
            if !mask[r * cols + c] {
                continue;
            }
            for rr in r.saturating_sub(1)..(r + 2).min(rows) {
                for cc in c.saturating_sub(1)..(c + 2).min(cols) {
                    out[rr * cols + cc] = true;
                }
            }
        }
    }
    out
}

/// Per-pixel primitive labels; 0 is unassigned, `k` is primitive `k − 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentLabelImage {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    /// Squared distance to the winning model for band pixels; 0 for interior
    /// pixels, infinite where unassigned.
    pub dist2: Vec<f64>,
}

impl SegmentLabelImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            labels: vec![0; width * height],
            dist2: vec![f64::INFINITY; width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> u32 {
        self.labels[v * self.width + u]
    }

    /// Pixel count per label `1..=n`, index `k − 1`.
    pub fn counts(&self, n: usize) -> Vec<usize> {
        let mut out = vec![0; n];
        for &l in &self.labels {
            if l > 0 && (l as usize) <= n {
                out[l as usize - 1] += 1;
            }
        }
        out
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l > 0).count()
    }

    /// 8-bit rendering; fails beyond 255 labels.
    pub fn to_u8(&self) -> Result<DepthImage<u8>> {
        let data = self
            .labels
            .iter()
            .map(|&l| u8::try_from(l).map_err(|_| Error::InvalidInput(format!("label {l} does not fit in 8 bits"))))
            .collect::<Result<Vec<u8>>>()?;
        DepthImage::new(self.width, self.height, data)
    }

    pub fn from_u8(image: &DepthImage<u8>) -> Self {
        let labels: Vec<u32> = image.data.iter().map(|&l| l as u32).collect();
        let dist2 = labels.iter().map(|&l| if l > 0 { 0.0 } else { f64::INFINITY }).collect();
        Self {
            width: image.width,
            height: image.height,
            labels,
            dist2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    /// Input primitives surviving erosion, in input order.
    pub primitives: Vec<Primitive>,
    /// Input index of each kept primitive.
    pub source: Vec<usize>,
    /// Labels index `primitives`.
    pub labels: SegmentLabelImage,
}

/// Labels eroded-interior pixels directly and resolves band pixels by the
/// lexicographic minimum of `(dist², label)`. Primitives whose cells erode
/// away are dropped and their cells left free. Assumes primitives own
/// disjoint cells.
pub fn refine_all(
    primitives: Vec<Primitive>,
    grid: &CellGrid,
    cloud: &OrganizedCloud,
    cfg: &RefineConfig,
) -> Result<Refinement> {
    cfg.validate()?;
    if cloud.width < grid.cols * grid.patch_size || cloud.height < grid.rows * grid.patch_size {
        return Err(Error::InvalidInput("cloud smaller than grid".into()));
    }
    let (rows, cols) = (grid.rows, grid.cols);
    let mut kept = Vec::new();
    let mut source = Vec::new();
    let mut interiors = Vec::new();
    let mut bands = Vec::new();
    for (i, p) in primitives.into_iter().enumerate() {
        let mut mask = vec![false; grid.len()];
        for &c in p.cells() {
            mask[c] = true;
        }
        let interior = erode(&mask, rows, cols);
        if !interior.iter().any(|&b| b) {
            continue;
        }
        let band: Vec<bool> = dilate(&mask, rows, cols).iter().zip(&interior).map(|(&d, &e)| d && !e).collect();
        kept.push(p);
        source.push(i);
        interiors.push(interior);
        bands.push(band);
    }
    let mut labels = SegmentLabelImage::new(cloud.width, cloud.height);
    let mut owned = vec![false; grid.len()];
    for (k, interior) in interiors.iter().enumerate() {
        for c in (0..grid.len()).filter(|&c| interior[c]) {
            owned[c] = true;
            let r = grid.rect(c);
            for v in r.v0..r.v0 + r.size {
                for u in r.u0..r.u0 + r.size {
                    let idx = v * cloud.width + u;
                    if cloud.valid[idx] {
                        labels.labels[idx] = k as u32 + 1;
                        labels.dist2[idx] = 0.0;
                    }
                }
            }
        }
    }
    for (k, band) in bands.iter().enumerate() {
        let prim = &kept[k];
        let bound = cfg.factor * prim.mse().max(cfg.mse_floor);
        let label = k as u32 + 1;
        for c in (0..grid.len()).filter(|&c| band[c] && !owned[c]) {
            let r = grid.rect(c);
            for v in r.v0..r.v0 + r.size {
                for u in r.u0..r.u0 + r.size {
                    let idx = v * cloud.width + u;
                    if !cloud.valid[idx] {
                        continue;
                    }
                    let d2 = prim.distance(&cloud.points[idx]).powi(2);
                    // Bands are visited in label order, so strict `<` keeps the lowest label on ties.
                    if d2 < bound && d2 < labels.dist2[idx] {
                        labels.dist2[idx] = d2;
                        labels.labels[idx] = label;
                    }
                }
            }
        }
    }
    Ok(Refinement {
        primitives: kept,
        source,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cell_grid::{build_grid, CellGridConfig};
    use crate::cloud::{backproject, Intrinsics};
    use crate::fitting::{fit_segment, FitConfig, PlaneModel};
    use crate::histogram::{HistogramConfig, NormalHistogram};
    use crate::region_growing::{grow_all, GrowConfig};
    use crate::scene::{render_scene, NoiseModel, ScenePrimitive};
    use nalgebra::Vector3;
    use proptest::prelude::*;

    fn erode_oracle(mask: &[bool], rows: usize, cols: usize) -> Vec<bool> {
        let at = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols && mask[r as usize * cols + c as usize];
        (0..rows * cols)
            .map(|i| {
                let (r, c) = ((i / cols) as isize, (i % cols) as isize);
                at(r, c) && at(r - 1, c) && at(r + 1, c) && at(r, c - 1) && at(r, c + 1)
            })
            .collect()
    }

    fn dilate_oracle(mask: &[bool], rows: usize, cols: usize) -> Vec<bool> {
        (0..rows * cols)
            .map(|i| {
                let (r, c) = ((i / cols) as isize, (i % cols) as isize);
                (-1..=1).any(|dr| {
                    (-1..=1).any(|dc| {
                        let (rr, cc) = (r + dr, c + dc);
                        rr >= 0 && cc >= 0 && (rr as usize) < rows && (cc as usize) < cols && mask[rr as usize * cols + cc as usize]
                    })
                })
            })
            .collect()
    }

    fn from_cells(rows: usize, cols: usize, cells: &[(usize, usize)]) -> Vec<bool> {
        let mut m = vec![false; rows * cols];
        for &(r, c) in cells {
            m[r * cols + c] = true;
        }
        m
    }

    #[test]
    fn erode_examples() {
        let block = from_cells(5, 5, &[(1, 1), (1, 2), (1, 3), (2, 1), (2, 2), (2, 3), (3, 1), (3, 2), (3, 3)]);
        assert_eq!(erode(&block, 5, 5), from_cells(5, 5, &[(2, 2)]));
        let line = from_cells(3, 7, &[(1, 1), (1, 2), (1, 3), (1, 4), (1, 5)]);
        assert!(erode(&line, 3, 7).iter().all(|&b| !b));
        let full = vec![true; 24 * 32];
        let e = erode(&full, 24, 32);
        for (i, &v) in e.iter().enumerate() {
            let (r, c) = (i / 32, i % 32);
            assert_eq!(v, r > 0 && r < 23 && c > 0 && c < 31);
        }
    }

    #[test]
    fn dilate_examples() {
        let single = from_cells(5, 5, &[(2, 2)]);
        let d = dilate(&single, 5, 5);
        assert_eq!(d.iter().filter(|&&b| b).count(), 9);
        let corner = from_cells(5, 5, &[(0, 0)]);
        assert_eq!(dilate(&corner, 5, 5), from_cells(5, 5, &[(0, 0), (0, 1), (1, 0), (1, 1)]));
        let diag = from_cells(6, 6, &[(1, 1), (2, 2)]);
        assert_eq!(dilate(&diag, 6, 6), dilate_oracle(&diag, 6, 6));
        assert_eq!(dilate(&diag, 6, 6).iter().filter(|&&b| b).count(), 14);
    }

    proptest! {
        #[test]
        fn morphology_matches_oracle(rows in 1usize..12, cols in 1usize..12, bits in prop::collection::vec(any::<bool>(), 144)) {
            let mask = &bits[..rows * cols];
            prop_assert_eq!(erode(mask, rows, cols), erode_oracle(mask, rows, cols));
            prop_assert_eq!(dilate(mask, rows, cols), dilate_oracle(mask, rows, cols));
        }
    }

    struct Frame {
        cloud: OrganizedCloud,
        grid: CellGrid,
    }

    fn frame(prims: &[ScenePrimitive]) -> Frame {
        let intr = Intrinsics::vga();
        let s = render_scene(prims, &intr, (640, 480), NoiseModel::None, 0).unwrap();
        let cloud = backproject(&s.depth, &intr).unwrap();
        let grid = build_grid(&cloud, &CellGridConfig::default()).unwrap();
        Frame { cloud, grid }
    }

    fn extract(f: &Frame) -> Vec<Primitive> {
        let mut hist = NormalHistogram::from_grid(HistogramConfig::default(), &f.grid).unwrap();
        let segs = grow_all(&f.grid, &mut hist, &GrowConfig::default()).unwrap();
        let mut out = Vec::new();
        for (k, s) in segs.iter().enumerate() {
            let fit = fit_segment(&f.grid, &f.cloud, &s.cells, &FitConfig::default(), k as u64).unwrap();
            out.extend(fit.planes.into_iter().map(Primitive::Plane));
            out.extend(fit.cylinders.into_iter().map(Primitive::Cylinder));
        }
        out
    }

    fn pixel_cells(grid: &CellGrid, cloud: &OrganizedCloud, mask: &[bool]) -> Vec<bool> {
        let mut px = vec![false; cloud.width * cloud.height];
        for c in (0..grid.len()).filter(|&c| mask[c]) {
            let r = grid.rect(c);
            for v in r.v0..r.v0 + r.size {
                for u in r.u0..r.u0 + r.size {
                    px[v * cloud.width + u] = true;
                }
            }
        }
        px
    }

    #[test]
    fn isolated_wall_band_containment() {
        let f = frame(&[ScenePrimitive::plane(Vector3::new(0.0, 0.0, -1.0), 2.0)]);
        let prims = extract(&f);
        assert_eq!(prims.len(), 1);
        let mut mask = vec![false; f.grid.len()];
        for &c in prims[0].cells() {
            mask[c] = true;
        }
        let inner = pixel_cells(&f.grid, &f.cloud, &erode(&mask, f.grid.rows, f.grid.cols));
        let outer = pixel_cells(&f.grid, &f.cloud, &dilate(&mask, f.grid.rows, f.grid.cols));
        let out = refine_all(prims, &f.grid, &f.cloud, &RefineConfig::default()).unwrap();
        for i in 0..out.labels.labels.len() {
            let l = out.labels.labels[i];
            if inner[i] && f.cloud.valid[i] {
                assert_eq!(l, 1);
            }
            if l > 0 {
                assert!(outer[i] && f.cloud.valid[i]);
            }
        }
        assert!(out.labels.labeled_count() as f64 >= 0.95 * f.cloud.valid_count() as f64);
    }

    #[test]
    fn perpendicular_walls_split_by_distance() {
        // Floor y = 0.5 and wall z = 3 meet along a horizontal edge.
        let floor = ScenePrimitive::plane(Vector3::new(0.0, -1.0, 0.0), 0.5);
        let wall = ScenePrimitive::plane(Vector3::new(0.0, 0.0, -1.0), 3.0);
        let f = frame(&[floor, wall]);
        let prims = extract(&f);
        assert_eq!(prims.len(), 2);
        let out = refine_all(prims, &f.grid, &f.cloud, &RefineConfig::default()).unwrap();
        assert_eq!(out.primitives.len(), 2);
        let truth: Vec<&ScenePrimitive> = out
            .primitives
            .iter()
            .map(|p| match p {
                Primitive::Plane(m) if m.normal.y.abs() > 0.9 => &floor,
                _ => &wall,
            })
            .collect();
        let mut boundary = 0;
        for i in 0..out.labels.labels.len() {
            let l = out.labels.labels[i];
            if l == 0 || out.labels.dist2[i] == 0.0 {
                continue;
            }
            boundary += 1;
            let p = &f.cloud.points[i];
            let own = truth[l as usize - 1].distance(p);
            let other = truth[2 - l as usize].distance(p);
            assert!(own <= other + 1e-9, "pixel {i}: own {own} other {other}");
        }
        assert!(boundary > 0);
    }

    #[test]
    fn threshold_is_strict() {
        let f = frame(&[ScenePrimitive::plane(Vector3::new(0.0, 0.0, -1.0), 2.0)]);
        let rows = f.grid.rows;
        let cols = f.grid.cols;
        // A 3x3 block of cells in the grid center; its band ring is tested against a model shifted off the wall.
        let cells: Vec<usize> = (10..13).flat_map(|r| (14..17).map(move |c| r * cols + c)).collect();
        let mse: f64 = 1e-4;
        let offset = (9.5 * mse).sqrt();
        let plane = Primitive::Plane(PlaneModel {
            normal: Vector3::new(0.0, 0.0, -1.0),
            d: 2.0 - offset,
            mse,
            cells,
            moments: Default::default(),
        });
        assert!(rows > 13);
        let out = refine_all(vec![plane], &f.grid, &f.cloud, &RefineConfig::default()).unwrap();
        let counts = out.labels.counts(1);
        // Only the eroded center cell is labeled.
        assert_eq!(counts[0], 400);
    }

    #[test]
    fn fully_eroded_primitive_dropped() {
        let f = frame(&[ScenePrimitive::plane(Vector3::new(0.0, 0.0, -1.0), 2.0)]);
        let line: Vec<usize> = (3..8).map(|c| 5 * f.grid.cols + c).collect();
        let p = Primitive::Plane(PlaneModel {
            normal: Vector3::new(0.0, 0.0, -1.0),
            d: 2.0,
            mse: 1e-6,
            cells: line,
            moments: Default::default(),
        });
        let out = refine_all(vec![p], &f.grid, &f.cloud, &RefineConfig::default()).unwrap();
        assert!(out.primitives.is_empty());
        assert_eq!(out.labels.labeled_count(), 0);
    }

    #[test]
    fn label_png_limit() {
        let mut l = SegmentLabelImage::new(2, 1);
        l.labels[0] = 255;
        assert!(l.to_u8().is_ok());
        l.labels[1] = 256;
        assert!(l.to_u8().is_err());
        let img = DepthImage::new(2, 1, vec![3u8, 0]).unwrap();
        let back = SegmentLabelImage::from_u8(&img);
        assert_eq!(back.labels, vec![3, 0]);
    }
}
