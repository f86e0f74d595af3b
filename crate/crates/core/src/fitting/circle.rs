//! Closed-form circle fit from projected points and normals, minimizing
//! `Σ ‖P'ᵢ − r·N'ᵢ − C‖² / 2`.

use nalgebra::{Matrix3, Vector2, Vector3};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CircleFit {
    /// `|r|`.
    pub radius: f64,
    /// Positive when normals point away from the center.
    pub signed_radius: f64,
    pub center: Vector3<f64>,
    /// `‖P'ᵢ − r·N'ᵢ − C‖` with the signed radius.
    pub residuals: Vec<f64>,
}

/// `(signed r, C)` over the samples selected by `idx`.
#[inline]
pub(crate) fn solve<I>(p: &[Vector3<f64>], n: &[Vector3<f64>], idx: I) -> Result<(f64, Vector3<f64>)>
where
    I: Iterator<Item = usize> + Clone,
{
    let mut m = 0usize;
    let mut pm = Vector3::zeros();
    let mut nm = Vector3::zeros();
    for i in idx.clone() {
        m += 1;
        pm += p[i];
        nm += n[i];
    }
    if m < 2 {
        return Err(Error::DegenerateFit(format!("circle fit needs 2 samples, got {m}")));
    }
    let inv = 1.0 / m as f64;
    pm *= inv;
    nm *= inv;
    let mut num = 0.0;
    let mut dot = 0.0;
    for i in idx {
        num += n[i].dot(&(p[i] - pm));
        dot += n[i].dot(&nm);
    }
    let denom = 1.0 - dot * inv;
    if denom.abs() < 1e-12 {
        return Err(Error::FlatSurface);
    }
    let r = num * inv / denom;
    Ok((r, pm - nm * r))
}

pub fn fit_circle_direct(p: &[Vector3<f64>], n: &[Vector3<f64>]) -> Result<CircleFit> {
    if p.len() != n.len() {
        return Err(Error::InvalidInput(format!("{} points but {} normals", p.len(), n.len())));
    }
    if p.len() >= 2 && p.iter().all(|q| *q == p[0]) && n.iter().all(|q| *q == n[0]) {
        return Err(Error::DegenerateFit("all samples identical".into()));
    }
    let (r, center) = solve(p, n, 0..p.len())?;
    let residuals = p
        .iter()
        .zip(n)
        .map(|(pi, ni)| (pi - ni * r - center).norm())
        .collect();
    Ok(CircleFit {
        radius: r.abs(),
        signed_radius: r,
        center,
        residuals,
    })
}

/// Refit compensating the inward offset of each cell centroid from the arc
/// it samples, `sagᵢ = λ_tᵢ / (2|r|)` with `λ_tᵢ` the cell's point variance
/// along the arc. Samples move by `sign(r)·sagᵢ·N'ᵢ`; returns `(signed r, C)`.
pub(crate) fn solve_sag_corrected(
    p: &[Vector3<f64>],
    n: &[Vector3<f64>],
    tangential_var: &[f64],
    idx: &[usize],
    iterations: usize,
) -> Result<(f64, Vector3<f64>)> {
    let (mut r, mut c) = solve(p, n, idx.iter().copied())?;
    let mut shifted = p.to_vec();
    for _ in 0..iterations {
        for &i in idx {
            shifted[i] = p[i] + n[i] * (tangential_var[i] / (2.0 * r));
        }
        (r, c) = solve(&shifted, n, idx.iter().copied())?;
    }
    Ok((r, c))
}

/// Gauss-Newton on `Σ (‖qᵢ − c‖ − r)²` over 2D samples from `(r, c)`.
/// Returns `None` if the start is unusable or a step fails to decrease cost;
/// the caller keeps its estimate then.
pub(crate) fn refine_geometric(q: &[Vector2<f64>], r0: f64, c0: Vector2<f64>, max_iter: usize) -> Option<(f64, Vector2<f64>)> {
    let cost = |r: f64, c: &Vector2<f64>| q.iter().map(|p| ((p - c).norm() - r).powi(2)).sum::<f64>();
    if q.len() < 3 || !(r0 > 0.0) {
        return None;
    }
    let (mut r, mut c) = (r0, c0);
    let mut e = cost(r, &c);
    for _ in 0..max_iter {
        let mut h = Matrix3::zeros();
        let mut g = Vector3::zeros();
        for p in q {
            let d = p - c;
            let len = d.norm();
            if len == 0.0 {
                return None;
            }
            let j = Vector3::new(-d.x / len, -d.y / len, -1.0);
            h += j * j.transpose();
            g += j * (len - r);
        }
        let step = h.cholesky()?.solve(&-g);
        let (rn, cn) = (r + step.z, c + Vector2::new(step.x, step.y));
        let en = cost(rn, &cn);
        if !(rn > 0.0) || !(en <= e) {
            break;
        }
        (r, c, e) = (rn, cn, en);
        if step.norm() <= 1e-12 * r {
            break;
        }
    }
    Some((r, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::TAU;

    fn circle(r: f64, c: Vector3<f64>, k: usize, outward: bool) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
        let s = if outward { 1.0 } else { -1.0 };
        (0..k)
            .map(|i| {
                let a = TAU * i as f64 / k as f64;
                let d = Vector3::new(a.cos(), a.sin(), 0.0);
                (c + d * r, d * s)
            })
            .unzip()
    }

    #[test]
    fn eight_points_outward() {
        let (p, n) = circle(2.0, Vector3::new(1.0, 1.0, 0.0), 8, true);
        let f = fit_circle_direct(&p, &n).unwrap();
        assert!((f.radius - 2.0).abs() < 1e-9);
        assert!((f.center - Vector3::new(1.0, 1.0, 0.0)).norm() < 1e-9);
        assert!(f.residuals.iter().all(|&e| e < 1e-9));
    }

    #[test]
    fn inward_normals_give_negative_signed_radius() {
        let (p, n) = circle(2.0, Vector3::new(1.0, 1.0, 0.0), 8, false);
        let f = fit_circle_direct(&p, &n).unwrap();
        assert!(f.signed_radius < 0.0);
        assert!((f.radius - 2.0).abs() < 1e-9);
        assert!((f.center - Vector3::new(1.0, 1.0, 0.0)).norm() < 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        let p = vec![Vector3::new(1.0, 0.0, 0.0); 4];
        let n = vec![Vector3::new(1.0, 0.0, 0.0); 4];
        assert!(matches!(fit_circle_direct(&p, &n), Err(Error::DegenerateFit(_))));
        let line: Vec<_> = (0..4).map(|i| Vector3::new(0.0, i as f64, 0.0)).collect();
        assert!(matches!(fit_circle_direct(&line, &n), Err(Error::FlatSurface)));
        assert!(fit_circle_direct(&p[..1], &n[..1]).is_err());
    }

    #[test]
    fn sag_correction_recovers_arc_radius() {
        // Cells sampling short arcs: centroids sit inside the circle.
        let (r, c) = (0.2, Vector3::new(0.0, 0.0, 0.0));
        let half = 0.12;
        let mut p = Vec::new();
        let mut n = Vec::new();
        let mut var = Vec::new();
        for k in 0..7 {
            let a0 = -1.0 + k as f64 * 0.3;
            let pts: Vec<Vector3<f64>> = (0..200)
                .map(|j| {
                    let a = a0 - half + 2.0 * half * j as f64 / 199.0;
                    c + Vector3::new(a.cos(), a.sin(), 0.0) * r
                })
                .collect();
            let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
            let dir = Vector3::new(a0.cos(), a0.sin(), 0.0);
            let t = Vector3::new(-a0.sin(), a0.cos(), 0.0);
            let vt = pts.iter().map(|q| (q - mean).dot(&t).powi(2)).sum::<f64>() / pts.len() as f64;
            p.push(mean);
            n.push(dir);
            var.push(vt);
        }
        let idx: Vec<usize> = (0..p.len()).collect();
        let (raw, _) = solve(&p, &n, idx.iter().copied()).unwrap();
        let (corr, cc) = solve_sag_corrected(&p, &n, &var, &idx, 3).unwrap();
        assert!((raw - r).abs() / r > 1e-3);
        assert!((corr - r).abs() / r < 1e-5);
        assert!(cc.norm() < 1e-5);
    }

    #[test]
    fn geometric_refit_from_biased_start() {
        let (r, c) = (0.5, Vector2::new(0.2, -1.0));
        let q: Vec<_> = (0..50)
            .map(|i| {
                let a = 3.6 + 2.2 * i as f64 / 49.0;
                c + Vector2::new(a.cos(), a.sin()) * r
            })
            .collect();
        let (rr, cc) = refine_geometric(&q, 0.49, c + Vector2::new(0.01, 0.005), 30).unwrap();
        assert!((rr - r).abs() < 1e-10);
        assert!((cc - c).norm() < 1e-10);
        assert!(refine_geometric(&q[..2], 0.5, c, 30).is_none());
    }

    /// `E(r, C) = Σ ‖P − rN − C‖² / 2`.
    fn energy(p: &[Vector3<f64>], n: &[Vector3<f64>], r: f64, c: &Vector3<f64>) -> f64 {
        p.iter().zip(n).map(|(pi, ni)| (pi - ni * r - c).norm_squared() / 2.0).sum()
    }

    proptest! {
        #[test]
        fn exact_on_noise_free_circles(
            r in 0.1f64..5.0,
            cx in -5.0f64..5.0, cy in -5.0f64..5.0,
            angles in prop::collection::vec(0.0f64..TAU, 3..20),
            outward in any::<bool>(),
        ) {
            let c = Vector3::new(cx, cy, 0.0);
            let s = if outward { 1.0 } else { -1.0 };
            let mut sorted = angles.clone();
            sorted.sort_by(f64::total_cmp);
            prop_assume!(sorted[sorted.len() - 1] - sorted[0] > 0.05);
            let (p, n): (Vec<_>, Vec<_>) = angles.iter().map(|a| {
                let d = Vector3::new(a.cos(), a.sin(), 0.0);
                (c + d * r, d * s)
            }).unzip();
            let f = fit_circle_direct(&p, &n).unwrap();
            prop_assert!((f.radius - r).abs() <= 1e-8 * r);
            prop_assert!((f.center - c).norm() <= 1e-8 * (c.norm() + r));
        }

        #[test]
        fn stationary_point_of_energy(
            seed in prop::collection::vec((0.0f64..TAU, -0.05f64..0.05, -0.1f64..0.1), 4..15),
        ) {
            let (p, n): (Vec<_>, Vec<_>) = seed.iter().map(|&(a, dr, dn)| {
                let d = Vector3::new(a.cos(), a.sin(), 0.0);
                let nn = Vector3::new((a + dn).cos(), (a + dn).sin(), 0.0);
                (d * (1.5 + dr), nn)
            }).unzip();
            let f = fit_circle_direct(&p, &n).unwrap();
            let (r, c) = (f.signed_radius, f.center);
            // E is quadratic in (r, C), so central differences are exact up to rounding.
            let h = 1e-4;
            let de_dr = (energy(&p, &n, r + h, &c) - energy(&p, &n, r - h, &c)) / (2.0 * h);
            prop_assert!(de_dr.abs() < 1e-9);
            for k in 0..3 {
                let mut e = Vector3::zeros();
                e[k] = h;
                let de = (energy(&p, &n, r, &(c + e)) - energy(&p, &n, r, &(c - e))) / (2.0 * h);
                prop_assert!(de.abs() < 1e-9);
            }
        }
    }
}
