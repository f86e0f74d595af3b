//! Pose residuals, their Jacobians under the left perturbation
//! `(exp([ω]×)·R, t + δt)`, and first-order residual variances.

use nalgebra::{Matrix3, Matrix3x6, Matrix6, Vector3, Vector6};

use super::{CylinderFeature, PlaneFeature, Pose};
use crate::linalg::skew;

/// `[(B − A)×(A − R·A' − t); (B − A)×(A − R·B' − t)]` with `{A, B}` from the
/// previous frame and `{A', B'}` from the current one.
pub fn cylinder_residual(pose: &Pose, prev: &CylinderFeature, curr: &CylinderFeature) -> Vector6<f64> {
    let u = prev.b - prev.a;
    let w1 = prev.a - pose.apply(&curr.a);
    let w2 = prev.a - pose.apply(&curr.b);
    let r1 = u.cross(&w1);
    let r2 = u.cross(&w2);
    Vector6::new(r1.x, r1.y, r1.z, r2.x, r2.y, r2.z)
}

/// Columns `(ω, t)`.
pub fn cylinder_jacobian(pose: &Pose, prev: &CylinderFeature, curr: &CylinderFeature) -> Matrix6<f64> {
    let su = skew(&(prev.b - prev.a));
    let mut j = Matrix6::zeros();
    for (row, pt) in [curr.a, curr.b].iter().enumerate() {
        let rp = pose.rotation * pt;
        j.fixed_view_mut::<3, 3>(3 * row, 0).copy_from(&(su * skew(&rp)));
        j.fixed_view_mut::<3, 3>(3 * row, 3).copy_from(&(-su));
    }
    j
}

/// Diagonal of `J_prev Σ_prev J_prevᵀ + J_curr Σ_curr J_currᵀ` over the
/// endpoint coordinates of both cylinders.
pub fn cylinder_residual_variance(pose: &Pose, prev: &CylinderFeature, curr: &CylinderFeature) -> Vector6<f64> {
    let u = prev.b - prev.a;
    let su = skew(&u);
    let r = *pose.r();
    let mut jp = Matrix6::zeros();
    let mut jc = Matrix6::zeros();
    for (row, pt) in [curr.a, curr.b].iter().enumerate() {
        let w = prev.a - pose.apply(pt);
        let sw = skew(&w);
        jp.fixed_view_mut::<3, 3>(3 * row, 0).copy_from(&(sw + su));
        jp.fixed_view_mut::<3, 3>(3 * row, 3).copy_from(&(-sw));
        jc.fixed_view_mut::<3, 3>(3 * row, 3 * row).copy_from(&(-su * r));
    }
    let cov = jp * prev.endpoint_cov * jp.transpose() + jc * curr.endpoint_cov * jc.transpose();
    cov.diagonal()
}

/// The current plane mapped into the previous frame, `n = R·N'` and
/// `s = d' − n·t`, compared in the scaled form `s·n − d·N`.
pub fn plane_residual(pose: &Pose, prev: &PlaneFeature, curr: &PlaneFeature) -> Vector3<f64> {
    let n = pose.rotation * curr.normal;
    let s = curr.d - n.dot(&pose.translation);
    n * s - prev.normal * prev.d
}

/// Independent of the previous plane; it enters the residual as a constant.
pub fn plane_jacobian(pose: &Pose, curr: &PlaneFeature) -> Matrix3x6<f64> {
    let t = pose.translation;
    let n = pose.rotation * curr.normal;
    let s = curr.d - n.dot(&t);
    let sn = skew(&n);
    let d_omega = n * (t.transpose() * sn) - sn * s;
    let d_t = -(n * n.transpose());
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&d_omega);
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&d_t);
    j
}

pub fn plane_residual_variance(pose: &Pose, prev: &PlaneFeature, curr: &PlaneFeature) -> Vector3<f64> {
    let r = *pose.r();
    let t = pose.translation;
    let n = r * curr.normal;
    let s = curr.d - n.dot(&t);
    let mut jc = nalgebra::Matrix3x4::zeros();
    jc.fixed_view_mut::<3, 3>(0, 0).copy_from(&(r * s - n * (t.transpose() * r)));
    jc.fixed_view_mut::<3, 1>(0, 3).copy_from(&n);
    let mut jp = nalgebra::Matrix3x4::zeros();
    jp.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-Matrix3::identity() * prev.d));
    jp.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-prev.normal));
    let cov = jp * prev.cov * jp.transpose() + jc * curr.cov * jc.transpose();
    cov.diagonal()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, Matrix4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cyl(a: Vector3<f64>, b: Vector3<f64>) -> CylinderFeature {
        CylinderFeature {
            label: 1,
            a,
            b,
            radius: 0.5,
            var_r: 1e-6,
            endpoint_cov: Matrix6::identity() * 1e-6,
        }
    }

    fn plane(n: Vector3<f64>, d: f64) -> PlaneFeature {
        PlaneFeature {
            label: 1,
            normal: n.normalize(),
            d,
            cov: Matrix4::identity() * 1e-6,
        }
    }

    fn unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
        Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize()
    }

    fn fd_jacobian<const R: usize>(f: impl Fn(&Pose) -> nalgebra::SVector<f64, R>, pose: &Pose) -> DMatrix<f64> {
        let h = 1e-6;
        let mut j = DMatrix::zeros(R, 6);
        for k in 0..6 {
            let mut e = Vector6::zeros();
            e[k] = h;
            let plus = f(&pose.retract(&e));
            let minus = f(&pose.retract(&-e));
            j.set_column(k, &((plus - minus) / (2.0 * h)));
        }
        j
    }

    fn relative(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / a.norm().max(b.norm()).max(1e-12)
    }

    #[test]
    fn cylinder_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let pose = Pose::from_axis_angle(unit(&mut rng) * rng.random_range(0.0..0.4), unit(&mut rng) * 0.3);
            let prev = cyl(unit(&mut rng) + Vector3::new(0.0, 0.0, 2.0), unit(&mut rng));
            let curr = cyl(unit(&mut rng), unit(&mut rng) + Vector3::new(0.0, 0.0, 2.0));
            let an = cylinder_jacobian(&pose, &prev, &curr);
            let fd = fd_jacobian(|p| cylinder_residual(p, &prev, &curr), &pose);
            let an = DMatrix::from_column_slice(6, 6, an.as_slice());
            assert!(relative(&an, &fd) < 1e-5, "{}", relative(&an, &fd));
        }
    }

    #[test]
    fn plane_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let pose = Pose::from_axis_angle(unit(&mut rng) * rng.random_range(0.0..0.4), unit(&mut rng) * 0.3);
            let prev = plane(unit(&mut rng), rng.random_range(0.5..3.0));
            let curr = plane(unit(&mut rng), rng.random_range(0.5..3.0));
            let an = plane_jacobian(&pose, &curr);
            let fd = fd_jacobian(|p| plane_residual(p, &prev, &curr), &pose);
            let an = DMatrix::from_column_slice(3, 6, an.as_slice());
            assert!(relative(&an, &fd) < 1e-5, "{}", relative(&an, &fd));
        }
    }

    #[test]
    fn cylinder_residual_examples() {
        let (a, b) = (Vector3::new(0.0, -1.0, 2.0), Vector3::new(0.0, 1.0, 2.0));
        let c = cyl(a, b);
        assert_eq!(cylinder_residual(&Pose::identity(), &c, &c), Vector6::zeros());
        let slide = Pose::from_axis_angle(Vector3::zeros(), Vector3::new(0.0, 0.37, 0.0));
        assert!(cylinder_residual(&slide, &c, &c).norm() < 1e-12);
        let cu = cyl(a, a + Vector3::y());
        let perp = Pose::from_axis_angle(Vector3::zeros(), Vector3::new(0.1, 0.0, 0.0));
        let r = cylinder_residual(&perp, &cu, &cu);
        assert!((r.fixed_rows::<3>(0).norm() - 0.1).abs() < 1e-12);
        assert!((r.fixed_rows::<3>(3).norm() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn cylinder_residual_invariant_to_axis_sliding() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let pose = Pose::from_axis_angle(unit(&mut rng) * 0.2, unit(&mut rng) * 0.2);
            let prev = cyl(Vector3::new(0.1, -0.5, 2.0), Vector3::new(0.2, 0.6, 2.1));
            let curr = cyl(Vector3::new(-0.3, -0.4, 1.8), Vector3::new(-0.1, 0.7, 2.0));
            let base = cylinder_residual(&pose, &prev, &curr);
            let du = (prev.b - prev.a) * rng.random_range(-1.0..1.0);
            let slid = CylinderFeature { a: prev.a + du, b: prev.b + du, ..prev };
            assert!((cylinder_residual(&pose, &slid, &curr) - base).norm() < 1e-12);
            // Current points sliding along an aligned axis stay on it.
            let aligned = curr.expressed_in(&pose);
            let aligned = CylinderFeature { a: pose.inverse().apply(&prev.a), b: pose.inverse().apply(&prev.b), ..aligned };
            let dv = (aligned.b - aligned.a) * rng.random_range(-1.0..1.0);
            let aligned_slid = CylinderFeature { a: aligned.a + dv, b: aligned.b + dv, ..aligned };
            assert!(cylinder_residual(&pose, &prev, &aligned).norm() < 1e-12);
            assert!(cylinder_residual(&pose, &prev, &aligned_slid).norm() < 1e-12);
        }
    }

    #[test]
    fn plane_residual_examples() {
        let p = plane(Vector3::new(0.0, 0.0, -1.0), 2.0);
        assert_eq!(plane_residual(&Pose::identity(), &p, &p), Vector3::zeros());
        // The camera moves by 0.1 along the normal, so d' = d − 0.1 and t = −0.1·N.
        let moved = PlaneFeature { d: 1.9, ..p };
        let pose = Pose::from_axis_angle(Vector3::zeros(), -p.normal * 0.1);
        assert!(plane_residual(&pose, &p, &moved).norm() < 1e-12);
        let spin = Pose::from_axis_angle(p.normal * 10f64.to_radians(), Vector3::zeros());
        assert!(plane_residual(&spin, &p, &p).norm() < 1e-12);
    }

    #[test]
    fn variances_are_positive_and_scale_linearly() {
        let pose = Pose::from_axis_angle(Vector3::new(0.1, 0.0, 0.05), Vector3::new(0.05, 0.0, 0.1));
        let p = plane(Vector3::new(0.1, 0.2, -1.0), 2.0);
        let v = plane_residual_variance(&pose, &p, &p);
        assert!(v.iter().all(|&x| x > 0.0));
        let p2 = PlaneFeature { cov: p.cov * 2.0, ..p };
        assert!((plane_residual_variance(&pose, &p2, &p2) - v * 2.0).norm() < 1e-15);
        let c = cyl(Vector3::new(0.0, -1.0, 2.0), Vector3::new(0.1, 1.0, 2.0));
        let vc = cylinder_residual_variance(&pose, &c, &c);
        assert!(vc.iter().all(|&x| x >= 0.0));
    }
}
