//! Per-segment classification into planes and cylinders.

pub mod circle;
pub mod ransac;

use nalgebra::{Matrix3, Matrix4, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cell_grid::{CellGrid, Moments, PlaneFit};
use crate::cloud::{DepthNoiseModel, OrganizedCloud};
use crate::error::{Error, Result};
use crate::linalg::{orthonormal_complement, SymEigen3};
use crate::prob_cylinder::CylinderUncertainty;
use crate::region_growing::CellSegment;

pub use circle::{fit_circle_direct, CircleFit};
pub use ransac::{sequential_ransac, CircleModel, RansacConfig, RansacModel, RansacTrace};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitConfig {
    /// Segments with `λ_mid / λ_min` above this are planes.
    pub plane_min_score: f64,
    /// Minimum `λ_max / λ_min` of the stacked ±normals to try cylinders.
    pub extrusion_min_score: f64,
    pub ransac: RansacConfig,
    /// Base RNG seed; segment `k` draws from stream `k`.
    pub seed: u64,
    /// Coplanar merge: minimum normal dot product.
    pub merge_normal_dot: f64,
    /// Coplanar merge: offset tolerance is `max(3√MSE, this)` (meters).
    pub merge_offset_min: f64,
    /// Gauss-Newton steps of the pixel-level circle refit after RANSAC;
    /// 0 keeps the cell-level estimate.
    pub pixel_refit_iterations: usize,
    pub parallel: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            plane_min_score: 100.0,
            extrusion_min_score: 100.0,
            ransac: RansacConfig::default(),
            seed: 0,
            merge_normal_dot: (std::f64::consts::PI / 12.0).cos(),
            merge_offset_min: 0.01,
            pixel_refit_iterations: 20,
            parallel: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.plane_min_score > 1.0 && self.extrusion_min_score > 1.0) {
            return Err(Error::InvalidInput("plane and extrusion scores must exceed 1".into()));
        }
        if !(self.ransac.inlier_rel_err > 0.0) || self.ransac.iterations == 0 || self.ransac.min_inliers < 3 {
            return Err(Error::InvalidInput(
                "RANSAC needs a positive inlier threshold, at least one iteration and min_inliers >= 3".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlaneModel {
    /// Unit, camera-facing.
    pub normal: Vector3<f64>,
    /// `normal · p + d = 0`, `d > 0`.
    pub d: f64,
    pub mse: f64,
    /// Grid cell indices, ascending.
    pub cells: Vec<usize>,
    pub moments: Moments,
}

impl PlaneModel {
    fn from_fit(fit: &PlaneFit, cells: Vec<usize>, moments: Moments) -> Self {
        Self {
            normal: fit.normal,
            d: fit.d,
            mse: fit.mse,
            cells,
            moments,
        }
    }

    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        (self.normal.dot(p) + self.d).abs()
    }

    /// First-order covariance of `(N, d)` for member points with isotropic
    /// variance `σ_z(z̄)²` at the centroid depth. Zero along `N` itself, since
    /// the normal only moves in its tangent plane. Zero when there are no moments.
    pub fn parameter_covariance(&self, noise: &DepthNoiseModel) -> Matrix4<f64> {
        let m = &self.moments;
        if m.count < 3 {
            return Matrix4::zeros();
        }
        let n = m.count as f64;
        let c = m.centroid();
        let s2 = (m.covariance() + c * c.transpose()) * n;
        let s1 = c * n;
        let (e1, e2) = orthonormal_complement(&self.normal);
        let basis = [e1, e2];
        let mut h = Matrix3::zeros();
        for i in 0..2 {
            for j in 0..2 {
                h[(i, j)] = (basis[i].transpose() * s2 * basis[j])[0];
            }
            h[(i, 2)] = basis[i].dot(&s1);
            h[(2, i)] = h[(i, 2)];
        }
        h[(2, 2)] = n;
        let var = noise.sigma(c.z).powi(2);
        let Some(inv) = h.try_inverse() else {
            return Matrix4::zeros();
        };
        let mut p = nalgebra::Matrix4x3::zeros();
        p.fixed_view_mut::<3, 1>(0, 0).copy_from(&e1);
        p.fixed_view_mut::<3, 1>(0, 1).copy_from(&e2);
        p[(3, 2)] = 1.0;
        let cov = p * inv * p.transpose() * var;
        (cov + cov.transpose()) * 0.5
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CylinderModel {
    /// Unit axis, parallel to `b − a`.
    pub axis: Vector3<f64>,
    /// Axis endpoints spanning the member points.
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
    /// Mean of `(distance to axis − r)²` over member pixels.
    pub mse: f64,
    /// Grid cell indices, ascending.
    pub cells: Vec<usize>,
    pub uncertainty: Option<CylinderUncertainty>,
}

impl CylinderModel {
    pub fn center(&self) -> Vector3<f64> {
        (self.a + self.b) * 0.5
    }

    pub fn axis_distance(&self, p: &Vector3<f64>) -> f64 {
        let q = p - self.a;
        (q - self.axis * self.axis.dot(&q)).norm()
    }

    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        (self.axis_distance(p) - self.radius).abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Plane(PlaneModel),
    Cylinder(CylinderModel),
}

impl Primitive {
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Primitive::Plane(m) => m.distance(p),
            Primitive::Cylinder(m) => m.distance(p),
        }
    }

    pub fn mse(&self) -> f64 {
        match self {
            Primitive::Plane(m) => m.mse,
            Primitive::Cylinder(m) => m.mse,
        }
    }

    pub fn cells(&self) -> &[usize] {
        match self {
            Primitive::Plane(m) => &m.cells,
            Primitive::Cylinder(m) => &m.cells,
        }
    }
}

fn pooled_moments(grid: &CellGrid, cells: &[usize]) -> Moments {
    let mut m = Moments::default();
    for &c in cells {
        m += &grid.cells[c].moments;
    }
    m
}

/// `λ_mid / λ_min` of the pooled point covariance with the plane fit.
/// Degenerate covariance scores 0; `λ_min = 0` scores infinity.
pub fn plane_score(grid: &CellGrid, cells: &[usize]) -> (f64, Option<PlaneFit>) {
    match pooled_moments(grid, cells).fit_plane() {
        Ok(fit) => {
            let [l0, l1, _] = fit.eigenvalues;
            let score = if l0 > 0.0 { l1 / l0 } else { f64::INFINITY };
            (score, Some(fit))
        }
        Err(_) => (0.0, None),
    }
}

/// PCA of the stacked `[N; −N]`: returns the axis (smallest eigenvector) and
/// `λ_max / λ_min`.
pub fn extrusion_test(normals: &[Vector3<f64>]) -> Result<(Vector3<f64>, f64)> {
    if normals.len() < 3 {
        return Err(Error::InvalidInput(format!("extrusion test needs 3 normals, got {}", normals.len())));
    }
    if normals.iter().any(|n| n.norm() < 1e-12) {
        return Err(Error::ContractViolation("zero normal in extrusion test".into()));
    }
    // The stack has zero mean, so its covariance is the normals' scatter.
    let scatter = normals.iter().map(|n| n * n.transpose()).sum::<nalgebra::Matrix3<f64>>() / normals.len() as f64;
    let eig = SymEigen3::new(&scatter);
    let lmin = eig.min_value();
    let cond = if lmin > 0.0 { eig.max_value() / lmin } else { f64::INFINITY };
    Ok((canonical_sign(eig.min_vector()), cond))
}

/// Flips `v` so its largest-magnitude component is positive.
pub fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    let i = v.iamax();
    if v[i] < 0.0 {
        -v
    } else {
        v
    }
}

/// Projects centroids and normals onto the plane through the origin
/// orthogonal to `v`. Normals parallel to `v` come back `None`.
pub fn project_to_plane(
    p: &[Vector3<f64>],
    n: &[Vector3<f64>],
    v: &Vector3<f64>,
) -> (Vec<Vector3<f64>>, Vec<Option<Vector3<f64>>>) {
    let pp = p.iter().map(|q| q - v * v.dot(q)).collect();
    let nn = n
        .iter()
        .map(|q| {
            let w = q - v * v.dot(q);
            let len = w.norm();
            (len > 1e-9).then(|| w / len)
        })
        .collect();
    (pp, nn)
}

/// Cylinder over `cells` from an axis line; the endpoints span the member
/// pixels projected on the axis. Also returns the pixel MSE.
fn cylinder_from_axis(
    grid: &CellGrid,
    cloud: &OrganizedCloud,
    cells: &[usize],
    axis: Vector3<f64>,
    point: Vector3<f64>,
    radius: f64,
) -> Option<CylinderModel> {
    let mut sum = 0.0;
    let mut count = 0usize;
    let (mut tmin, mut tmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for_each_member_point(grid, cloud, cells, |p| {
        let q = p - point;
        let t = axis.dot(&q);
        let dist = (q - axis * t).norm();
        sum += (dist - radius).powi(2);
        count += 1;
        tmin = tmin.min(t);
        tmax = tmax.max(t);
    });
    if count == 0 || !(tmax - tmin > 1e-9) {
        return None;
    }
    Some(CylinderModel {
        axis,
        a: point + axis * tmin,
        b: point + axis * tmax,
        radius,
        mse: sum / count as f64,
        cells: cells.to_vec(),
        uncertainty: None,
    })
}

const PIXEL_TRIM_ROUNDS: usize = 30;
const PIXEL_TRIM_MADS: f64 = 3.0;

fn median_abs(mut res: Vec<f64>) -> f64 {
    let mid = res.len() / 2;
    *res.select_nth_unstable_by(mid, f64::total_cmp).1
}

/// Three robust standard deviations (MAD based) of absolute residuals, at
/// least `floor`. `res` must be non-empty.
pub fn outlier_bound(res: &[f64], floor: f64) -> f64 {
    (PIXEL_TRIM_MADS * 1.4826 * median_abs(res.to_vec())).max(floor)
}

/// Geometric circle fit over the points within 3 robust standard deviations
/// of the current circle, reselected from all of `q` each round. Returns the
/// circle and its median absolute residual over all of `q`.
fn trimmed_circle(q: &[Vector2<f64>], r0: f64, c0: Vector2<f64>, iterations: usize) -> Option<(f64, Vector2<f64>, f64)> {
    let residuals = |r: f64, c: &Vector2<f64>| q.iter().map(|p| ((p - c).norm() - r).abs()).collect::<Vec<f64>>();
    let (mut r, mut c) = (r0, c0);
    let mut kept: Vec<bool> = Vec::new();
    for _ in 0..PIXEL_TRIM_ROUNDS {
        let res = residuals(r, &c);
        let bound = outlier_bound(&res, 1e-9 * r);
        let sel: Vec<bool> = res.iter().map(|&e| e <= bound).collect();
        if sel == kept {
            break;
        }
        let sub: Vec<Vector2<f64>> = q.iter().zip(&sel).filter(|(_, &k)| k).map(|(p, _)| *p).collect();
        (r, c) = circle::refine_geometric(&sub, r, c, iterations)?;
        kept = sel;
    }
    Some((r, c, median_abs(residuals(r, &c))))
}

/// Trimmed geometric circle refit over the member pixels projected along
/// `axis`, seeded from each candidate `(radius, center)`; the seed ending
/// with the smallest median residual wins. Falls back to the first seed.
fn pixel_refit(
    grid: &CellGrid,
    cloud: &OrganizedCloud,
    cells: &[usize],
    axis: &Vector3<f64>,
    seeds: &[(f64, Vector3<f64>)],
    iterations: usize,
) -> (f64, Vector3<f64>) {
    let first = seeds[0];
    if iterations == 0 {
        return first;
    }
    let (e1, e2) = orthonormal_complement(axis);
    let mut q = Vec::new();
    for_each_member_point(grid, cloud, cells, |p| q.push(Vector2::new(e1.dot(p), e2.dot(p))));
    let best = seeds
        .iter()
        .filter_map(|&(r, c)| trimmed_circle(&q, r, Vector2::new(e1.dot(&c), e2.dot(&c)), iterations))
        .min_by(|a, b| a.2.total_cmp(&b.2));
    match best {
        Some((r, c, _)) => (r, e1 * c.x + e2 * c.y + axis * axis.dot(&first.1)),
        None => first,
    }
}

const PLANE_TRIM_SAMPLE: usize = 8192;

/// Whether all eight neighbors of `cell` exist and belong to the segment.
fn is_interior(grid: &CellGrid, member: &[bool], cell: usize) -> bool {
    let (r, c) = (cell / grid.cols, cell % grid.cols);
    if r == 0 || c == 0 || r + 1 == grid.rows || c + 1 == grid.cols {
        return false;
    }
    (r - 1..=r + 1).all(|i| (c - 1..=c + 1).all(|j| member[grid.index(i, j)]))
}

/// Refits `plane` after trimming pixels of its boundary cells beyond 3 robust
/// standard deviations of the current plane, reselected each round. A cell
/// crossed by a crease or silhouette always has a neighbor outside the
/// segment, so interior cells enter whole through their moments. The
/// deviation is estimated on a pixel lattice of about `PLANE_TRIM_SAMPLE`
/// points over all member cells. `plane` must be the fit of all valid member
/// pixels; it is kept when nothing is trimmed or a round degenerates.
pub fn refit_plane_pixels(plane: PlaneModel, grid: &CellGrid, cloud: &OrganizedCloud) -> PlaneModel {
    let mut member = vec![false; grid.len()];
    for &c in &plane.cells {
        member[c] = true;
    }
    let (interior, boundary): (Vec<usize>, Vec<usize>) = plane.cells.iter().partition(|&&c| is_interior(grid, &member, c));
    let mut inner = Moments::default();
    for &c in &interior {
        inner += &grid.cells[c].moments;
    }
    let mut edge = Vec::new();
    for_each_member_point(grid, cloud, &boundary, |p| edge.push(*p));
    let area = plane.cells.len() * grid.patch_size * grid.patch_size;
    let step = ((area as f64 / PLANE_TRIM_SAMPLE as f64).sqrt() as usize).max(1);
    let floor = 1e-9 * plane.d.abs().max(1.0);
    let mut current = plane;
    let mut kept = vec![true; edge.len()];
    for _ in 0..PIXEL_TRIM_ROUNDS {
        let mut sample = Vec::new();
        for_each_member_point_strided(grid, cloud, &current.cells, step, |p| sample.push(current.distance(p)));
        if sample.is_empty() {
            break;
        }
        let bound = outlier_bound(&sample, floor);
        let sel: Vec<bool> = edge.iter().map(|p| current.distance(p) <= bound).collect();
        if sel == kept {
            break;
        }
        let mut moments = inner;
        for (p, _) in edge.iter().zip(&sel).filter(|(_, &k)| k) {
            moments.push(p);
        }
        let Ok(fit) = moments.fit_plane() else { break };
        current = PlaneModel::from_fit(&fit, std::mem::take(&mut current.cells), moments);
        kept = sel;
    }
    current
}

pub(crate) fn for_each_member_point(
    grid: &CellGrid,
    cloud: &OrganizedCloud,
    cells: &[usize],
    mut f: impl FnMut(&Vector3<f64>),
) {
    for &c in cells {
        let r = grid.rect(c);
        for v in r.v0..r.v0 + r.size {
            let base = v * cloud.width;
            for u in r.u0..r.u0 + r.size {
                if cloud.valid[base + u] {
                    f(&cloud.points[base + u]);
                }
            }
        }
    }
}

/// As [`for_each_member_point`], visiting every `step`-th row and column of each cell.
fn for_each_member_point_strided(
    grid: &CellGrid,
    cloud: &OrganizedCloud,
    cells: &[usize],
    step: usize,
    mut f: impl FnMut(&Vector3<f64>),
) {
    for &c in cells {
        let r = grid.rect(c);
        for v in (r.v0..r.v0 + r.size).step_by(step) {
            let base = v * cloud.width;
            for u in (r.u0..r.u0 + r.size).step_by(step) {
                if cloud.valid[base + u] {
                    f(&cloud.points[base + u]);
                }
            }
        }
    }
}

/// Picks the plane when `MSE_plane ≤ MSE_cylinder`.
pub fn arbitrate(plane: Option<PlaneModel>, cylinder: Option<CylinderModel>) -> Option<Primitive> {
    match (plane, cylinder) {
        (Some(p), Some(c)) if p.mse <= c.mse => Some(Primitive::Plane(p)),
        (_, Some(c)) => Some(Primitive::Cylinder(c)),
        (Some(p), None) => Some(Primitive::Plane(p)),
        (None, None) => None,
    }
}

/// Outcome for one grown segment. Every input cell lands in exactly one of
/// the planes, the cylinders, or `discarded`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentFit {
    pub planes: Vec<PlaneModel>,
    pub cylinders: Vec<CylinderModel>,
    pub discarded: Vec<usize>,
    pub extrusion_score: Option<f64>,
    pub ransac: Option<RansacTrace>,
}

/// Plane test, then extrusion test and sequential RANSAC with per-subsegment
/// plane/cylinder arbitration. `stream` selects the RNG stream.
pub fn fit_segment(
    grid: &CellGrid,
    cloud: &OrganizedCloud,
    segment_cells: &[usize],
    cfg: &FitConfig,
    stream: u64,
) -> Result<SegmentFit> {
    let mut cells = segment_cells.to_vec();
    cells.sort_unstable();
    let mut out = SegmentFit::default();
    let (score, fit) = plane_score(grid, &cells);
    if score > cfg.plane_min_score {
        let fit = fit.expect("finite score implies a fit");
        let moments = pooled_moments(grid, &cells);
        out.planes.push(PlaneModel::from_fit(&fit, cells, moments));
        return Ok(out);
    }
    if cells.len() < 3 {
        out.discarded = cells;
        return Ok(out);
    }
    let normals: Vec<Vector3<f64>> = cells.iter().map(|&c| grid.cells[c].normal).collect();
    let (axis, cond) = extrusion_test(&normals)?;
    out.extrusion_score = Some(cond);
    if !(cond > cfg.extrusion_min_score) {
        out.discarded = cells;
        return Ok(out);
    }
    let centroids: Vec<Vector3<f64>> = cells.iter().map(|&c| grid.cells[c].centroid).collect();
    let (pp, nn) = project_to_plane(&centroids, &normals, &axis);
    let active: Vec<usize> = (0..cells.len()).filter(|&i| nn[i].is_some()).collect();
    let nn: Vec<Vector3<f64>> = nn.into_iter().map(|n| n.unwrap_or_else(Vector3::zeros)).collect();
    let tangential: Vec<f64> = cells
        .iter()
        .zip(&nn)
        .map(|(&c, n)| {
            let t = axis.cross(n);
            (t.transpose() * grid.cells[c].moments.covariance() * t)[0]
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let (models, trace) = sequential_ransac(&pp, &nn, &active, Some(&tangential), &cfg.ransac, &mut rng);
    out.ransac = Some(trace);
    let mut used = vec![false; cells.len()];
    for m in &models {
        let sub: Vec<usize> = m.inliers.iter().map(|&i| cells[i]).collect();
        let plane = {
            let moments = pooled_moments(grid, &sub);
            moments.fit_plane().ok().map(|f| PlaneModel::from_fit(&f, sub.clone(), moments))
        };
        let cylinder = match m.model {
            CircleModel::Circle { signed_radius, center } => {
                let mut seeds = vec![(signed_radius.abs(), center)];
                if let CircleModel::Circle { signed_radius, center } = m.hypothesis {
                    seeds.push((signed_radius.abs(), center));
                }
                let (r, c) = pixel_refit(grid, cloud, &sub, &axis, &seeds, cfg.pixel_refit_iterations);
                cylinder_from_axis(grid, cloud, &sub, axis, c, r)
            }
            CircleModel::Flat { .. } => None,
        };
        match arbitrate(plane, cylinder) {
            Some(Primitive::Plane(p)) => out.planes.push(p),
            Some(Primitive::Cylinder(c)) => out.cylinders.push(c),
            None => continue,
        }
        for &i in &m.inliers {
            used[i] = true;
        }
    }
    out.discarded = cells.iter().zip(&used).filter(|(_, &u)| !u).map(|(&c, _)| c).collect();
    Ok(out)
}

/// Fits every segment; segment `k` uses RNG stream `k`, so serial and
/// parallel runs agree.
pub fn fit_segments(
    grid: &CellGrid,
    cloud: &OrganizedCloud,
    segments: &[CellSegment],
    cfg: &FitConfig,
) -> Result<Vec<SegmentFit>> {
    cfg.validate()?;
    let run = |(k, s): (usize, &CellSegment)| fit_segment(grid, cloud, &s.cells, cfg, k as u64);
    if cfg.parallel {
        segments.par_iter().enumerate().map(run).collect()
    } else {
        segments.iter().enumerate().map(run).collect()
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Unions 4-adjacent planes with similar parameters (transitively) and
/// refits each group from pooled moments. Output is ordered by the lowest
/// input index in each group.
pub fn merge_coplanar_segments(planes: Vec<PlaneModel>, grid: &CellGrid, cfg: &FitConfig) -> Vec<PlaneModel> {
    let k = planes.len();
    if k < 2 {
        return planes;
    }
    let mut owner = vec![usize::MAX; grid.len()];
    for (i, p) in planes.iter().enumerate() {
        for &c in &p.cells {
            owner[c] = i;
        }
    }
    let mut adjacent = std::collections::BTreeSet::new();
    for (i, p) in planes.iter().enumerate() {
        for &c in &p.cells {
            for nb in grid.neighbors4(c) {
                let j = owner[nb];
                if j != usize::MAX && j != i {
                    adjacent.insert((i.min(j), i.max(j)));
                }
            }
        }
    }
    let mut parent: Vec<usize> = (0..k).collect();
    for (i, j) in adjacent {
        let (a, b) = (&planes[i], &planes[j]);
        let tol = (3.0 * a.mse.max(b.mse).sqrt()).max(cfg.merge_offset_min);
        if a.normal.dot(&b.normal) > cfg.merge_normal_dot && (a.d - b.d).abs() < tol {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri != rj {
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in 0..k {
        let r = find(&mut parent, i);
        groups[r].push(i);
    }
    let mut out = Vec::new();
    let mut planes: Vec<Option<PlaneModel>> = planes.into_iter().map(Some).collect();
    for g in groups.into_iter().filter(|g| !g.is_empty()) {
        if g.len() == 1 {
            out.push(planes[g[0]].take().expect("each plane is in one group"));
            continue;
        }
        let mut cells = Vec::new();
        let mut moments = Moments::default();
        for &i in &g {
            let p = planes[i].take().expect("each plane is in one group");
            moments += &p.moments;
            cells.extend(p.cells);
        }
        cells.sort_unstable();
        match moments.fit_plane() {
            Ok(fit) => out.push(PlaneModel::from_fit(&fit, cells, moments)),
            Err(_) => unreachable!("a union of valid plane fits cannot be collinear"),
        }
    }
    out
}
