//! Uniform grid of image patches with per-patch plane fits.
//!
//! Each cell keeps the first and second raw moments of its points, so planes
//! over any union of cells come from summed moments alone
//! (`Σ = E[ppᵀ] − E[p]E[p]ᵀ`).

use std::ops::AddAssign;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::cloud::{DepthNoiseModel, OrganizedCloud};
use crate::error::{Error, Result};
use crate::linalg::SymEigen3;

/// Count, Σp and the upper triangle of Σppᵀ.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Moments {
    pub count: usize,
    pub sum: Vector3<f64>,
    /// `[xx, xy, xz, yy, yz, zz]`
    pub sum_sq: [f64; 6],
}

impl Moments {
    #[inline]
    pub fn push(&mut self, p: &Vector3<f64>) {
        self.count += 1;
        self.sum += p;
        self.sum_sq[0] += p.x * p.x;
        self.sum_sq[1] += p.x * p.y;
        self.sum_sq[2] += p.x * p.z;
        self.sum_sq[3] += p.y * p.y;
        self.sum_sq[4] += p.y * p.z;
        self.sum_sq[5] += p.z * p.z;
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a Vector3<f64>>) -> Self {
        let mut m = Self::default();
        for p in points {
            m.push(p);
        }
        m
    }

    pub fn centroid(&self) -> Vector3<f64> {
        self.sum / self.count as f64
    }

    pub fn second_moment(&self) -> Matrix3<f64> {
        let s = &self.sum_sq;
        Matrix3::new(s[0], s[1], s[2], s[1], s[3], s[4], s[2], s[4], s[5])
    }

    /// Population covariance via the König–Huygens identity.
    pub fn covariance(&self) -> Matrix3<f64> {
        let n = self.count as f64;
        let c = self.centroid();
        self.second_moment() / n - c * c.transpose()
    }

    /// PCA plane: normal is the eigenvector of the smallest covariance
    /// eigenvalue, MSE is that eigenvalue.
    pub fn fit_plane(&self) -> Result<PlaneFit> {
        if self.count < 3 {
            return Err(Error::DegenerateFit(format!("{} points", self.count)));
        }
        let centroid = self.centroid();
        let eig = SymEigen3::new(&self.covariance());
        let [l0, l1, l2] = eig.values;
        if !(l1 > 1e-12 * l2.max(f64::MIN_POSITIVE)) {
            return Err(Error::DegenerateFit("collinear points".into()));
        }
        let normal = orient_towards_camera(eig.min_vector(), &centroid);
        Ok(PlaneFit {
            normal,
            d: -normal.dot(&centroid),
            mse: l0.max(0.0),
            eigenvalues: [l0.max(0.0), l1, l2],
            centroid,
            count: self.count,
        })
    }
}

impl AddAssign<&Moments> for Moments {
    fn add_assign(&mut self, rhs: &Moments) {
        self.count += rhs.count;
        self.sum += rhs.sum;
        for (a, b) in self.sum_sq.iter_mut().zip(&rhs.sum_sq) {
            *a += b;
        }
    }
}

/// Flips `n` so that `n · centroid < 0` (the plane faces the camera at the origin).
pub fn orient_towards_camera(n: Vector3<f64>, centroid: &Vector3<f64>) -> Vector3<f64> {
    let s = n.dot(centroid);
    if s > 0.0 || (s == 0.0 && n.z > 0.0) {
        -n
    } else {
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFit {
    pub normal: Vector3<f64>,
    /// Offset with `normal · p + d = 0`; positive for camera-facing planes.
    pub d: f64,
    pub mse: f64,
    /// Covariance eigenvalues, ascending.
    pub eigenvalues: [f64; 3],
    pub centroid: Vector3<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellGridConfig {
    pub patch_size: usize,
    /// Cells with a larger fraction of invalid pixels are non-planar.
    pub missing_fraction_max: f64,
    /// Adjacent-pixel depth jump on the center cross, relative to the cell's
    /// mean depth, above which the cell is non-planar.
    pub discontinuity_ratio: f64,
    /// Tolerance added to the depth uncertainty in the planarity bound (meters).
    pub epsilon: f64,
    pub noise: DepthNoiseModel,
    pub parallel: bool,
}

impl Default for CellGridConfig {
    fn default() -> Self {
        Self {
            patch_size: 20,
            missing_fraction_max: 0.3,
            discontinuity_ratio: 0.1,
            epsilon: 0.005,
            noise: DepthNoiseModel::default(),
            parallel: false,
        }
    }
}

impl CellGridConfig {
    /// Planarity bound `(σ_z(z̄) + ε)²`.
    pub fn mse_bound(&self, mean_depth: f64) -> f64 {
        (self.noise.sigma(mean_depth) + self.epsilon).powi(2)
    }
}

/// Pixel rectangle of a square cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRect {
    pub u0: usize,
    pub v0: usize,
    pub size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellStats {
    pub row: usize,
    pub col: usize,
    pub moments: Moments,
    pub centroid: Vector3<f64>,
    /// Unit and camera-facing when planar; zero otherwise.
    pub normal: Vector3<f64>,
    pub d: f64,
    pub mse: f64,
    pub planar: bool,
    /// Distance between the 3D points at opposite corners of the cell.
    pub diameter: f64,
}

impl CellStats {
    pub fn count(&self) -> usize {
        self.moments.count
    }

    fn non_planar(row: usize, col: usize, moments: Moments) -> Self {
        let centroid = if moments.count > 0 {
            moments.centroid()
        } else {
            Vector3::zeros()
        };
        Self {
            row,
            col,
            moments,
            centroid,
            normal: Vector3::zeros(),
            d: 0.0,
            mse: f64::INFINITY,
            planar: false,
            diameter: 0.0,
        }
    }
}

/// Scans the center row and column of the cell. Returns whether every pair of
/// adjacent valid pixels differs by at most `max_jump`, and how many pixels
/// were read.
pub fn cross_is_continuous(cloud: &OrganizedCloud, rect: &CellRect, max_jump: f64) -> (bool, usize) {
    let mid_v = rect.v0 + rect.size / 2;
    let mid_u = rect.u0 + rect.size / 2;
    let mut examined = 0;
    let mut scan = |pixels: &mut dyn Iterator<Item = (usize, usize)>| -> bool {
        let mut prev: Option<f64> = None;
        for (u, v) in pixels {
            examined += 1;
            let i = cloud.index(u, v);
            if !cloud.valid[i] {
                prev = None;
                continue;
            }
            let z = cloud.points[i].z;
            if let Some(pz) = prev {
                if (z - pz).abs() > max_jump {
                    return false;
                }
            }
            prev = Some(z);
        }
        true
    };
    let row_ok = scan(&mut (rect.u0..rect.u0 + rect.size).map(|u| (u, mid_v)));
    if !row_ok {
        return (false, examined);
    }
    let col_ok = scan(&mut (rect.v0..rect.v0 + rect.size).map(|v| (mid_u, v)));
    (col_ok, examined)
}

/// Fits and classifies one cell. Degenerate cells come back non-planar.
pub fn classify_cell(cloud: &OrganizedCloud, rect: CellRect, cfg: &CellGridConfig) -> CellStats {
    let row = rect.v0 / rect.size;
    let col = rect.u0 / rect.size;
    let mut moments = Moments::default();
    for v in rect.v0..rect.v0 + rect.size {
        let base = v * cloud.width;
        for u in rect.u0..rect.u0 + rect.size {
            if cloud.valid[base + u] {
                moments.push(&cloud.points[base + u]);
            }
        }
    }
    let total = rect.size * rect.size;
    let missing = 1.0 - moments.count as f64 / total as f64;
    if moments.count < 3 || missing > cfg.missing_fraction_max {
        return CellStats::non_planar(row, col, moments);
    }
    let mean_depth = moments.centroid().z;
    let (continuous, _) = cross_is_continuous(cloud, &rect, cfg.discontinuity_ratio * mean_depth);
    if !continuous {
        return CellStats::non_planar(row, col, moments);
    }
    let fit = match moments.fit_plane() {
        Ok(f) => f,
        Err(_) => return CellStats::non_planar(row, col, moments),
    };
    if fit.mse >= cfg.mse_bound(mean_depth) {
        return CellStats::non_planar(row, col, moments);
    }
    CellStats {
        row,
        col,
        moments,
        centroid: fit.centroid,
        normal: fit.normal,
        d: fit.d,
        mse: fit.mse,
        planar: true,
        diameter: cell_diameter(cloud, &rect),
    }
}

fn cell_diameter(cloud: &OrganizedCloud, rect: &CellRect) -> f64 {
    let (u1, v1) = (rect.u0 + rect.size - 1, rect.v0 + rect.size - 1);
    if let (Some(a), Some(b)) = (cloud.point(rect.u0, rect.v0), cloud.point(u1, v1)) {
        return (a - b).norm();
    }
    // Corner missing: first and last valid pixels in scan order.
    let mut first = None;
    let mut last = None;
    for v in rect.v0..=v1 {
        for u in rect.u0..=u1 {
            if let Some(p) = cloud.point(u, v) {
                first.get_or_insert(*p);
                last = Some(*p);
            }
        }
    }
    match (first, last) {
        (Some(a), Some(b)) => (a - b).norm(),
        _ => 0.0,
    }
}

/// Row-major grid of cells; remainder pixels past the last full patch are ignored.
#[derive(Debug, Clone)]
pub struct CellGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub cells: Vec<CellStats>,
}

impl CellGrid {
    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn planar_count(&self) -> usize {
        self.cells.iter().filter(|c| c.planar).count()
    }

    /// 4-neighbors of cell `idx` inside the grid.
    pub fn neighbors4(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let (r, c) = (idx / self.cols, idx % self.cols);
        let up = (r > 0).then(|| idx - self.cols);
        let down = (r + 1 < self.rows).then(|| idx + self.cols);
        let left = (c > 0).then(|| idx - 1);
        let right = (c + 1 < self.cols).then(|| idx + 1);
        [up, left, right, down].into_iter().flatten()
    }

    pub fn rect(&self, idx: usize) -> CellRect {
        CellRect {
            u0: (idx % self.cols) * self.patch_size,
            v0: (idx / self.cols) * self.patch_size,
            size: self.patch_size,
        }
    }
}

pub fn build_grid(cloud: &OrganizedCloud, cfg: &CellGridConfig) -> Result<CellGrid> {
    let ps = cfg.patch_size;
    if ps < 4 {
        return Err(Error::InvalidInput(format!("patch size {ps} below minimum of 4")));
    }
    if ps > cloud.width || ps > cloud.height {
        return Err(Error::InvalidInput(format!(
            "patch size {ps} larger than {}x{} image",
            cloud.width, cloud.height
        )));
    }
    let rows = cloud.height / ps;
    let cols = cloud.width / ps;
    let rect = |i: usize| CellRect {
        u0: (i % cols) * ps,
        v0: (i / cols) * ps,
        size: ps,
    };
    let cells = if cfg.parallel {
        (0..rows * cols)
            .into_par_iter()
            .map(|i| classify_cell(cloud, rect(i), cfg))
            .collect()
    } else {
        (0..rows * cols).map(|i| classify_cell(cloud, rect(i), cfg)).collect()
    };
    Ok(CellGrid {
        rows,
        cols,
        patch_size: ps,
        cells,
    })
}

/// Plane over the union of `cells`, computed from summed raw moments only.
pub fn merged_plane_fit<'a>(cells: impl IntoIterator<Item = &'a CellStats>) -> Result<PlaneFit> {
    let mut m = Moments::default();
    for c in cells {
        m += &c.moments;
    }
    m.fit_plane()
}
