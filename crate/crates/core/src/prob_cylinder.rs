//! Weighted point-to-surface refinement of a cylinder with 5 parameters and
//! first-order parameter covariance.
//!
//! `ξ = (A_j, A_k, B_j, B_k, r)` where `j < k` are the coordinates left free;
//! the remaining coordinate of `A` and `B` is held at its initial value.
//! Residual per point: `‖(B − A) × (A − P)‖ / ‖B − A‖ − r`.

use nalgebra::{DMatrix, Matrix3, Matrix5, SymmetricEigen, Vector3, Vector5};

use crate::cloud::DepthNoiseModel;
use crate::error::{Error, Result};
use crate::fitting::CylinderModel;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CylinderParam5 {
    /// Index of the coordinate held fixed for both axis points.
    pub fixed: usize,
    pub fixed_a: f64,
    pub fixed_b: f64,
    pub xi: Vector5<f64>,
}

/// The two coordinate indices other than `fixed`, ascending.
pub fn free_indices(fixed: usize) -> [usize; 2] {
    match fixed {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    }
}

impl CylinderParam5 {
    /// Fixes the coordinate with the largest `|B_i − A_i|`, lowest index on ties.
    pub fn new(a: Vector3<f64>, b: Vector3<f64>, r: f64) -> Result<Self> {
        let u = b - a;
        let m = u.amax();
        if !(m > 0.0) {
            return Err(Error::ContractViolation("cylinder axis points coincide".into()));
        }
        let fixed = (0..3)
            .find(|&i| u[i].abs() >= m - 1e-12 * m)
            .expect("some component attains the max");
        Self::with_fixed(a, b, r, fixed)
    }

    pub fn with_fixed(a: Vector3<f64>, b: Vector3<f64>, r: f64, fixed: usize) -> Result<Self> {
        if fixed > 2 {
            return Err(Error::InvalidInput(format!("fixed coordinate {fixed} out of range")));
        }
        if (b[fixed] - a[fixed]).abs() < 1e-12 {
            return Err(Error::ContractViolation(format!(
                "axis has no extent along fixed coordinate {fixed}"
            )));
        }
        let [j, k] = free_indices(fixed);
        Ok(Self {
            fixed,
            fixed_a: a[fixed],
            fixed_b: b[fixed],
            xi: Vector5::new(a[j], a[k], b[j], b[k], r),
        })
    }

    pub fn a(&self) -> Vector3<f64> {
        self.point(self.xi[0], self.xi[1], self.fixed_a)
    }

    pub fn b(&self) -> Vector3<f64> {
        self.point(self.xi[2], self.xi[3], self.fixed_b)
    }

    pub fn r(&self) -> f64 {
        self.xi[4]
    }

    fn point(&self, x0: f64, x1: f64, f: f64) -> Vector3<f64> {
        let [j, k] = free_indices(self.fixed);
        let mut p = Vector3::zeros();
        p[j] = x0;
        p[k] = x1;
        p[self.fixed] = f;
        p
    }

    fn with_xi(&self, xi: Vector5<f64>) -> Self {
        Self { xi, ..*self }
    }
}

/// Initial parameters from a direct-fit model: `A, B` are its axis endpoints.
pub fn init_param(model: &CylinderModel) -> Result<CylinderParam5> {
    if !((model.b - model.a).norm() > 0.0) {
        return Err(Error::ContractViolation("cylinder has zero axis extent".into()));
    }
    CylinderParam5::new(model.a, model.b, model.radius)
}

/// Distance-to-surface residual and its gradients w.r.t. `A`, `B` and `P`.
#[derive(Debug, Clone, Copy)]
pub struct ResidualGrad {
    pub res: f64,
    pub d_a: Vector3<f64>,
    pub d_b: Vector3<f64>,
    pub d_p: Vector3<f64>,
}

#[inline]
pub fn residual_grad(a: &Vector3<f64>, b: &Vector3<f64>, r: f64, p: &Vector3<f64>) -> ResidualGrad {
    let u = b - a;
    let w = a - p;
    let c = u.cross(&w);
    let l = u.norm();
    let cn = c.norm();
    let dist = cn / l;
    if cn == 0.0 {
        // On the axis: a subgradient of zero for the distance term.
        return ResidualGrad {
            res: dist - r,
            d_a: Vector3::zeros(),
            d_b: Vector3::zeros(),
            d_p: Vector3::zeros(),
        };
    }
    let ch = c / cn;
    let l3 = l * l * l;
    ResidualGrad {
        res: dist - r,
        d_a: ch.cross(&(w + u)) / l + u * (cn / l3),
        d_b: -ch.cross(&w) / l - u * (cn / l3),
        d_p: -ch.cross(&u) / l,
    }
}

/// Per-point residuals and `E = Σ wᵢ resᵢ²`.
pub fn residuals(param: &CylinderParam5, points: &[Vector3<f64>], weights: &[f64]) -> Result<(Vec<f64>, f64)> {
    let (a, b) = (param.a(), param.b());
    if (b - a).norm() == 0.0 {
        return Err(Error::ContractViolation("cylinder axis points coincide".into()));
    }
    if points.len() != weights.len() {
        return Err(Error::InvalidInput("points and weights differ in length".into()));
    }
    let res: Vec<f64> = points.iter().map(|p| residual_grad(&a, &b, param.r(), p).res).collect();
    let cost = res.iter().zip(weights).map(|(r, w)| w * r * r).sum();
    Ok((res, cost))
}

/// Row of `∂resᵢ/∂ξ` from the point gradients.
#[inline]
fn jacobian_row(g: &ResidualGrad, fixed: usize) -> Vector5<f64> {
    let [j, k] = free_indices(fixed);
    Vector5::new(g.d_a[j], g.d_a[k], g.d_b[j], g.d_b[k], -1.0)
}

/// `m × 5` Jacobian of the residuals at `param`.
pub fn jacobian(param: &CylinderParam5, points: &[Vector3<f64>]) -> DMatrix<f64> {
    let (a, b) = (param.a(), param.b());
    let mut j = DMatrix::zeros(points.len(), 5);
    for (i, p) in points.iter().enumerate() {
        let row = jacobian_row(&residual_grad(&a, &b, param.r(), p), param.fixed);
        j.row_mut(i).copy_from(&row.transpose());
    }
    j
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub initial_damping: f64,
    pub max_iterations: usize,
    /// Stop when `(E_old − E_new) / E_old` falls below this.
    pub rel_cost_tol: f64,
    pub step_tol: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            initial_damping: 1e-4,
            max_iterations: 50,
            rel_cost_tol: 1e-8,
            step_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmResult {
    pub param: CylinderParam5,
    pub cost: f64,
    /// Step attempts, accepted or not.
    pub iterations: usize,
    pub converged: bool,
    /// Cost after each accepted step, starting with the initial cost.
    pub accepted_costs: Vec<f64>,
}

fn normal_equations(param: &CylinderParam5, points: &[Vector3<f64>], weights: &[f64]) -> (Matrix5<f64>, Vector5<f64>, f64) {
    let (a, b) = (param.a(), param.b());
    let mut h = Matrix5::zeros();
    let mut g = Vector5::zeros();
    let mut cost = 0.0;
    for (p, &w) in points.iter().zip(weights) {
        let rg = residual_grad(&a, &b, param.r(), p);
        let row = jacobian_row(&rg, param.fixed);
        h += row * row.transpose() * w;
        g += row * (w * rg.res);
        cost += w * rg.res * rg.res;
    }
    (h, g, cost)
}

fn cost_of(param: &CylinderParam5, points: &[Vector3<f64>], weights: &[f64]) -> f64 {
    let (a, b) = (param.a(), param.b());
    points
        .iter()
        .zip(weights)
        .map(|(p, w)| w * residual_grad(&a, &b, param.r(), p).res.powi(2))
        .sum()
}

/// Levenberg–Marquardt with multiplicative damping on `diag(H)`.
pub fn optimize(init: &CylinderParam5, points: &[Vector3<f64>], weights: &[f64], cfg: &LmConfig) -> Result<LmResult> {
    if points.len() < 6 {
        return Err(Error::InvalidInput(format!("cylinder refinement needs 6 points, got {}", points.len())));
    }
    if points.len() != weights.len() || weights.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::InvalidInput("weights must be positive, one per point".into()));
    }
    if (init.b() - init.a()).norm() == 0.0 {
        return Err(Error::ContractViolation("cylinder axis points coincide".into()));
    }
    let mut param = *init;
    let mut lambda = cfg.initial_damping;
    let (mut h, mut g, mut cost) = normal_equations(&param, points, weights);
    let mut accepted_costs = vec![cost];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iterations {
        if cost == 0.0 {
            converged = true;
            break;
        }
        iterations += 1;
        let mut damped = h;
        let dmax = h.diagonal().max();
        for i in 0..5 {
            damped[(i, i)] += lambda * h[(i, i)].max(1e-12 * dmax);
        }
        let Some(step) = damped.cholesky().map(|c| c.solve(&-g)) else {
            lambda *= 10.0;
            continue;
        };
        let candidate = param.with_xi(param.xi + step);
        let new_cost = if candidate.r() > 0.0 && (candidate.b() - candidate.a()).norm() > 0.0 {
            cost_of(&candidate, points, weights)
        } else {
            f64::INFINITY
        };
        if new_cost < cost {
            let rel = (cost - new_cost) / cost;
            param = candidate;
            lambda /= 10.0;
            (h, g, cost) = normal_equations(&param, points, weights);
            accepted_costs.push(cost);
            if rel < cfg.rel_cost_tol || step.norm() < cfg.step_tol {
                converged = true;
                break;
            }
        } else {
            lambda *= 10.0;
            if step.norm() < cfg.step_tol {
                converged = true;
                break;
            }
        }
    }
    Ok(LmResult {
        param,
        cost,
        iterations,
        converged,
        accepted_costs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CylinderUncertainty {
    /// Covariance of `ξ`.
    pub sigma_xi: Matrix5<f64>,
    pub var_r: f64,
    pub fixed: usize,
}

impl CylinderUncertainty {
    /// 3×3 covariances of `A` and `B`; zero along the fixed coordinate.
    pub fn point_covariances(&self) -> (Matrix3<f64>, Matrix3<f64>) {
        let [j, k] = free_indices(self.fixed);
        let mut ca = Matrix3::zeros();
        let mut cb = Matrix3::zeros();
        let idx = [j, k];
        for (s, &p) in idx.iter().enumerate() {
            for (t, &q) in idx.iter().enumerate() {
                ca[(p, q)] = self.sigma_xi[(s, t)];
                cb[(p, q)] = self.sigma_xi[(2 + s, 2 + t)];
            }
        }
        (ca, cb)
    }

    /// 6×6 joint covariance of `(A, B)`.
    pub fn endpoint_covariance(&self) -> nalgebra::Matrix6<f64> {
        let [j, k] = free_indices(self.fixed);
        let map = [j, k, 3 + j, 3 + k];
        let mut c = nalgebra::Matrix6::zeros();
        for (s, &p) in map.iter().enumerate() {
            for (t, &q) in map.iter().enumerate() {
                c[(p, q)] = self.sigma_xi[(s, t)];
            }
        }
        c
    }
}

/// `Σ_ξ = (Jᵀ Σ_r⁻¹ J)⁻¹` with `Σ_r` diagonal, `σ²ᵢ = gᵢ Σ_Pᵢ gᵢᵀ` and
/// `gᵢ = ∂resᵢ/∂Pᵢ`.
pub fn backpropagate_uncertainty(
    param: &CylinderParam5,
    points: &[Vector3<f64>],
    point_cov: &[Matrix3<f64>],
) -> Result<CylinderUncertainty> {
    if points.len() != point_cov.len() {
        return Err(Error::InvalidInput("points and covariances differ in length".into()));
    }
    let (a, b) = (param.a(), param.b());
    let mut info = Matrix5::zeros();
    for (p, cov) in points.iter().zip(point_cov) {
        let rg = residual_grad(&a, &b, param.r(), p);
        let var = (rg.d_p.transpose() * cov * rg.d_p)[0];
        if !(var > 0.0) {
            continue;
        }
        let row = jacobian_row(&rg, param.fixed);
        info += row * row.transpose() / var;
    }
    let sigma_xi = invert_spd(&info)?;
    Ok(CylinderUncertainty {
        sigma_xi,
        var_r: sigma_xi[(4, 4)].max(0.0),
        fixed: param.fixed,
    })
}

/// Generic `(Jᵀ Σ_r⁻¹ J)⁻¹` for an explicit Jacobian and diagonal residual variances.
pub fn parameter_covariance(j: &DMatrix<f64>, residual_var: &[f64]) -> Result<DMatrix<f64>> {
    let mut jw = j.clone();
    for (i, v) in residual_var.iter().enumerate() {
        jw.row_mut(i).scale_mut(1.0 / v);
    }
    let info = j.transpose() * jw;
    let eig = SymmetricEigen::new(info.clone());
    let max = eig.eigenvalues.amax();
    if !(eig.eigenvalues.min() > 1e-12 * max) {
        return Err(Error::RankDeficient("information matrix is singular".into()));
    }
    let inv = info
        .try_inverse()
        .ok_or_else(|| Error::RankDeficient("information matrix is singular".into()))?;
    Ok((&inv + inv.transpose()) * 0.5)
}

fn invert_spd(m: &Matrix5<f64>) -> Result<Matrix5<f64>> {
    let eig = SymmetricEigen::new(*m);
    let max = eig.eigenvalues.amax();
    if !(max > 0.0) || !(eig.eigenvalues.min() > 1e-12 * max) {
        return Err(Error::RankDeficient("cylinder information matrix is singular".into()));
    }
    let inv = m
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("cylinder information matrix is not positive definite".into()))?
        .inverse();
    Ok((inv + inv.transpose()) * 0.5)
}

/// Keeps pixels on a `step`-pixel lattice anchored at the set's bounding-box
/// origin.
pub fn subsample_grid(pixels: &[(usize, usize)], step: usize) -> Vec<(usize, usize)> {
    let step = step.max(1);
    let Some(u0) = pixels.iter().map(|p| p.0).min() else {
        return Vec::new();
    };
    let v0 = pixels.iter().map(|p| p.1).min().expect("non-empty");
    pixels
        .iter()
        .copied()
        .filter(|&(u, v)| (u - u0) % step == 0 && (v - v0) % step == 0)
        .collect()
}

/// Per-point weight of the residuals in the refit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResidualWeights {
    /// `1/σ_z²` of the point depth.
    DepthVariance,
    /// `1/(g Σ_P gᵀ)` with `g = ∂res/∂P` at the initial model, the residual
    /// variance that the parameter covariance assumes.
    #[default]
    Propagated,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbCylinderConfig {
    pub subsample_step: usize,
    pub lm: LmConfig,
    pub noise: DepthNoiseModel,
    pub weights: ResidualWeights,
}

impl Default for ProbCylinderConfig {
    fn default() -> Self {
        Self {
            subsample_step: 5,
            lm: LmConfig::default(),
            noise: DepthNoiseModel::default(),
            weights: ResidualWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedCylinder {
    pub model: CylinderModel,
    pub lm: LmResult,
}

/// Refines `model` on `points` and attaches the parameter covariance.
/// Non-converged fits are returned with `lm.converged == false`.
pub fn refine_cylinder(model: &CylinderModel, points: &[Vector3<f64>], cfg: &ProbCylinderConfig) -> Result<RefinedCylinder> {
    let init = init_param(model)?;
    let covs: Vec<Matrix3<f64>> = points.iter().map(|p| cfg.noise.point_covariance(p)).collect();
    let weights: Vec<f64> = match cfg.weights {
        ResidualWeights::DepthVariance => points.iter().map(|p| 1.0 / cfg.noise.sigma(p.z).powi(2)).collect(),
        ResidualWeights::Propagated => {
            let (a, b) = (init.a(), init.b());
            points
                .iter()
                .zip(&covs)
                .map(|(p, c)| {
                    let g = residual_grad(&a, &b, init.r(), p).d_p;
                    // Floor at 1e-4 of the depth variance so weights stay finite.
                    1.0 / (g.transpose() * c * g)[0].max(1e-4 * c[(2, 2)])
                })
                .collect()
        }
    };
    let lm = optimize(&init, points, &weights, &cfg.lm)?;
    let unc = backpropagate_uncertainty(&lm.param, points, &covs)?;
    let (a, b, r) = (lm.param.a(), lm.param.b(), lm.param.r());
    let mut axis = (b - a).normalize();
    // Keep the model's axis orientation.
    let (a, b) = if axis.dot(&model.axis) < 0.0 {
        axis = -axis;
        (b, a)
    } else {
        (a, b)
    };
    let mse = points.iter().map(|p| residual_grad(&a, &b, r, p).res.powi(2)).sum::<f64>() / points.len() as f64;
    let unc = if a == lm.param.a() {
        unc
    } else {
        swap_endpoints(unc)
    };
    Ok(RefinedCylinder {
        model: CylinderModel {
            axis,
            a,
            b,
            radius: r,
            mse,
            cells: model.cells.clone(),
            uncertainty: Some(unc),
        },
        lm,
    })
}

fn swap_endpoints(u: CylinderUncertainty) -> CylinderUncertainty {
    let perm = [2usize, 3, 0, 1, 4];
    let mut s = Matrix5::zeros();
    for i in 0..5 {
        for j in 0..5 {
            s[(i, j)] = u.sigma_xi[(perm[i], perm[j])];
        }
    }
    CylinderUncertainty { sigma_xi: s, ..u }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::orthonormal_complement;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn surface_points(a: Vector3<f64>, b: Vector3<f64>, r: f64, n: usize, rng: &mut impl Rng) -> Vec<Vector3<f64>> {
        let v = (b - a).normalize();
        let (e1, e2) = orthonormal_complement(&v);
        (0..n)
            .map(|_| {
                let t: f64 = rng.random_range(0.0..1.0);
                let th: f64 = rng.random_range(2.0..4.3);
                a + (b - a) * t + (e1 * th.cos() + e2 * th.sin()) * r
            })
            .collect()
    }

    fn model(a: Vector3<f64>, b: Vector3<f64>, r: f64) -> CylinderModel {
        CylinderModel {
            axis: (b - a).normalize(),
            a,
            b,
            radius: r,
            mse: 0.0,
            cells: vec![],
            uncertainty: None,
        }
    }

    #[test]
    fn gauge_choice() {
        let p = init_param(&model(Vector3::new(0.0, -0.5, 2.0), Vector3::new(0.0, 0.5, 2.0), 0.3)).unwrap();
        assert_eq!(p.fixed, 1);
        let d = Vector3::new(1.0, 1.0, 1.0) / 3f64.sqrt();
        let p = CylinderParam5::new(Vector3::zeros(), d, 0.3).unwrap();
        assert_eq!(p.fixed, 0);
        let a = Vector3::new(0.1, -0.4, 2.2);
        let b = Vector3::new(0.3, 0.6, 2.0);
        let p = CylinderParam5::new(a, b, 0.7).unwrap();
        assert_eq!((p.a(), p.b(), p.r()), (a, b, 0.7));
        assert!(init_param(&model(a, a, 0.2)).is_err());
    }

    #[test]
    fn residual_examples() {
        let a = Vector3::new(0.0, -1.0, 2.0);
        let b = Vector3::new(0.0, 1.0, 2.0);
        let p = CylinderParam5::new(a, b, 0.5).unwrap();
        let pts = vec![Vector3::new(0.5, 0.3, 2.0), Vector3::new(0.0, 0.7, 1.5), Vector3::new(0.0, 0.2, 2.0)];
        let (res, _) = residuals(&p, &pts, &[1.0; 3]).unwrap();
        assert!(res[0].abs() < 1e-15 && res[1].abs() < 1e-15);
        assert!((res[2] + 0.5).abs() < 1e-15);
        // Offsetting along the surface normal by δ gives residual δ.
        let delta = 0.0123;
        let q = Vector3::new(0.0, 0.4, 1.5 - delta);
        let (res, _) = residuals(&p, &[q], &[1.0]).unwrap();
        assert!((res[0] - delta).abs() < 1e-12);
    }

    fn fd_row(param: &CylinderParam5, p: &Vector3<f64>) -> Vector5<f64> {
        let h = 1e-6;
        let mut out = Vector5::zeros();
        for k in 0..5 {
            let mut e = Vector5::zeros();
            e[k] = h;
            let f = |x: Vector5<f64>| {
                let q = param.with_xi(x);
                residual_grad(&q.a(), &q.b(), q.r(), p).res
            };
            out[k] = (f(param.xi + e) - f(param.xi - e)) / (2.0 * h);
        }
        out
    }

    #[test]
    fn jacobian_matches_finite_differences_at_100_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let a = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..3.0));
            let b = a + Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * 2.0;
            let r = rng.random_range(0.1..1.0);
            let p0 = CylinderParam5::new(a, b, r).unwrap();
            let pt = Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.5..4.0));
            let analytic = jacobian_row(&residual_grad(&p0.a(), &p0.b(), r, &pt), p0.fixed);
            let numeric = fd_row(&p0, &pt);
            let scale = analytic.norm().max(1e-3);
            assert!((analytic - numeric).norm() <= 1e-5 * scale, "{analytic} vs {numeric}");
            // Point gradient.
            let h = 1e-6;
            for k in 0..3 {
                let mut e = Vector3::zeros();
                e[k] = h;
                let f = |q: Vector3<f64>| residual_grad(&p0.a(), &p0.b(), r, &q).res;
                let num = (f(pt + e) - f(pt - e)) / (2.0 * h);
                let an = residual_grad(&p0.a(), &p0.b(), r, &pt).d_p[k];
                assert!((num - an).abs() <= 1e-5 * 1f64.max(an.abs()));
            }
        }
    }

    #[test]
    fn recovers_from_perturbed_init() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b, r) = (Vector3::new(0.1, -0.5, 2.0), Vector3::new(-0.1, 0.5, 2.1), 0.5);
        let pts = surface_points(a, b, r, 300, &mut rng);
        let w = vec![1.0; pts.len()];
        let init = CylinderParam5::new(a * 1.05 + Vector3::new(0.02, 0.0, -0.03), b * 0.97, r * 1.05).unwrap();
        let out = optimize(&init, &pts, &w, &LmConfig::default()).unwrap();
        assert!(out.converged);
        assert!(out.iterations <= 10, "{} iterations", out.iterations);
        assert!((out.param.r() - r).abs() / r < 1e-8);
        assert!(out.accepted_costs.windows(2).all(|c| c[1] <= c[0]));
    }

    #[test]
    fn stationary_at_ground_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (a, b, r) = (Vector3::new(0.0, -0.5, 2.0), Vector3::new(0.0, 0.5, 2.0), 0.4);
        let pts = surface_points(a, b, r, 200, &mut rng);
        let init = CylinderParam5::new(a, b, r).unwrap();
        let out = optimize(&init, &pts, &vec![1.0; pts.len()], &LmConfig::default()).unwrap();
        assert!(out.iterations <= 1);
        assert!((out.param.xi - init.xi).amax() <= 1e-12);
    }

    #[test]
    fn identity_jacobian_gives_identity_covariance() {
        let j = DMatrix::<f64>::identity(5, 5);
        let c = parameter_covariance(&j, &[1.0; 5]).unwrap();
        assert!((c - DMatrix::identity(5, 5)).amax() < 1e-15);
        let doubled = parameter_covariance(&j, &[2.0; 5]).unwrap();
        assert!((doubled - DMatrix::identity(5, 5) * 2.0).amax() < 1e-15);
        let singular = DMatrix::<f64>::zeros(5, 5);
        assert!(matches!(parameter_covariance(&singular, &[1.0; 5]), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn doubling_point_variance_doubles_sigma_xi() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (a, b, r) = (Vector3::new(0.0, -0.5, 2.0), Vector3::new(0.0, 0.5, 2.0), 0.5);
        let pts = surface_points(a, b, r, 200, &mut rng);
        let p = CylinderParam5::new(a, b, r).unwrap();
        let noise = DepthNoiseModel::default();
        let c1: Vec<_> = pts.iter().map(|q| noise.point_covariance(q)).collect();
        let c2: Vec<_> = c1.iter().map(|c| c * 2.0).collect();
        let u1 = backpropagate_uncertainty(&p, &pts, &c1).unwrap();
        let u2 = backpropagate_uncertainty(&p, &pts, &c2).unwrap();
        assert!((u2.sigma_xi - u1.sigma_xi * 2.0).amax() <= 1e-9 * u1.sigma_xi.amax());
        let (ca, _) = u1.point_covariances();
        assert_eq!(ca.row(p.fixed).amax(), 0.0);
        assert!(ca[(0, 0)] > 0.0);
    }

    #[test]
    fn singular_geometry_is_rank_deficient() {
        // Every point at one spot: Jᵀ Σ⁻¹ J has rank 1.
        let p = CylinderParam5::new(Vector3::new(0.0, -0.5, 2.0), Vector3::new(0.0, 0.5, 2.0), 0.5).unwrap();
        let pts = vec![Vector3::new(0.0, 0.0, 1.5); 10];
        let covs = vec![Matrix3::identity() * 1e-6; 10];
        assert!(matches!(backpropagate_uncertainty(&p, &pts, &covs), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn gauge_reparameterization_gives_same_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, b, r) = (Vector3::new(0.05, -0.5, 2.0), Vector3::new(-0.2, 0.5, 2.3), 0.5);
        let pts: Vec<_> = surface_points(a, b, r, 400, &mut rng)
            .into_iter()
            .map(|p| p + Vector3::new(0.0, 0.0, 0.002 * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let w = vec![1.0; pts.len()];
        let fit = |fixed| {
            let init = CylinderParam5::with_fixed(a, b, r * 1.02, fixed).unwrap();
            optimize(&init, &pts, &w, &LmConfig { rel_cost_tol: 0.0, ..Default::default() }).unwrap().param
        };
        let (p1, p2) = (fit(1), fit(2));
        assert!((p1.r() - p2.r()).abs() < 1e-8);
        let v = (p1.b() - p1.a()).normalize();
        let dist = |q: Vector3<f64>| {
            let d = q - p1.a();
            (d - v * v.dot(&d)).norm()
        };
        assert!(dist(p2.a()) < 1e-8 && dist(p2.b()) < 1e-8);
    }

    #[test]
    fn subsample_lattice_anchored_at_bbox() {
        let px: Vec<_> = (3..20).flat_map(|v| (7..30).map(move |u| (u, v))).collect();
        let s = subsample_grid(&px, 5);
        assert!(s.contains(&(7, 3)) && s.contains(&(12, 8)));
        assert!(s.iter().all(|&(u, v)| (u - 7) % 5 == 0 && (v - 3) % 5 == 0));
        assert_eq!(s.len(), 5 * 4);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn accepted_costs_non_increasing(seed in 0u64..1000, scale in 0.9f64..1.1) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, r) = (Vector3::new(0.0, -0.5, 2.0), Vector3::new(0.1, 0.5, 2.0), 0.5);
            let pts: Vec<_> = surface_points(a, b, r, 100, &mut rng)
                .into_iter()
                .map(|p| p + Vector3::new(0.0, 0.0, 0.005 * rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let init = CylinderParam5::new(a, b, r * scale).unwrap();
            let out = optimize(&init, &pts, &vec![1.0; pts.len()], &LmConfig::default()).unwrap();
            prop_assert!(out.accepted_costs.windows(2).all(|c| c[1] <= c[0]));
        }
    }
}
