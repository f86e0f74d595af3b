//! Weighted Gauss-Newton over plane and cylinder matches with per-iteration
//! reweighting from propagated residual variances.

use nalgebra::{Matrix6, SymmetricEigen, Vector6};

use super::matching::{match_cylinders, match_planes, MatchConfig, Overlap};
use super::residuals::{
    cylinder_jacobian, cylinder_residual, cylinder_residual_variance, plane_jacobian, plane_residual,
    plane_residual_variance,
};
use super::{CylinderFeature, Frame, PlaneFeature, Pose};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseWeights {
    pub alpha_plane: f64,
    pub alpha_cylinder: f64,
}

impl Default for PoseWeights {
    fn default() -> Self {
        Self {
            alpha_plane: 0.01,
            alpha_cylinder: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseConfig {
    pub weights: PoseWeights,
    pub max_iterations: usize,
    pub step_tol: f64,
    /// Residual variances are clamped to at least this before inversion.
    pub var_floor: f64,
    /// Eigenvalues of the normal matrix below `rank_tol · λ_max` count as null.
    pub rank_tol: f64,
    pub max_halvings: usize,
}

impl Default for PoseConfig {
    fn default() -> Self {
        Self {
            weights: PoseWeights::default(),
            max_iterations: 50,
            step_tol: 1e-10,
            var_floor: 1e-12,
            rank_tol: 1e-10,
            max_halvings: 30,
        }
    }
}

impl PoseConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if !(w.alpha_plane >= 0.0 && w.alpha_cylinder >= 0.0) {
            return Err(Error::InvalidInput("pose weights must be non-negative".into()));
        }
        if self.max_iterations == 0 || !(self.step_tol > 0.0) || !(self.var_floor > 0.0) || !(self.rank_tol > 0.0) {
            return Err(Error::InvalidInput("pose solver tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationDiagnostics {
    /// Cost at the start of the iteration under its weights.
    pub cost_before: f64,
    /// Cost after the accepted step under the same weights.
    pub cost_after: f64,
    pub step_norm: f64,
    pub halvings: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEstimate {
    pub pose: Pose,
    /// Cost at `pose` under the weights evaluated there.
    pub cost: f64,
    pub converged: bool,
    pub iterations: Vec<IterationDiagnostics>,
}

type PlanePair<'a> = (&'a PlaneFeature, &'a PlaneFeature);
type CylinderPair<'a> = (&'a CylinderFeature, &'a CylinderFeature);

struct Weights {
    planes: Vec<[f64; 3]>,
    cylinders: Vec<[f64; 6]>,
}

fn weights_at(pose: &Pose, planes: &[PlanePair], cylinders: &[CylinderPair], floor: f64) -> Weights {
    Weights {
        planes: planes
            .iter()
            .map(|(p, c)| plane_residual_variance(pose, p, c).map(|v| 1.0 / v.max(floor)).into())
            .collect(),
        cylinders: cylinders
            .iter()
            .map(|(p, c)| cylinder_residual_variance(pose, p, c).map(|v| 1.0 / v.max(floor)).into())
            .collect(),
    }
}

fn cost(pose: &Pose, planes: &[PlanePair], cylinders: &[CylinderPair], w: &Weights, alpha: &PoseWeights) -> f64 {
    let mut e = 0.0;
    for ((p, c), wp) in planes.iter().zip(&w.planes) {
        let r = plane_residual(pose, p, c);
        e += alpha.alpha_plane * (0..3).map(|k| wp[k] * r[k] * r[k]).sum::<f64>();
    }
    for ((p, c), wc) in cylinders.iter().zip(&w.cylinders) {
        let r = cylinder_residual(pose, p, c);
        e += alpha.alpha_cylinder * (0..6).map(|k| wc[k] * r[k] * r[k]).sum::<f64>();
    }
    e
}

fn normal_equations(
    pose: &Pose,
    planes: &[PlanePair],
    cylinders: &[CylinderPair],
    w: &Weights,
    alpha: &PoseWeights,
) -> (Matrix6<f64>, Vector6<f64>) {
    let mut h = Matrix6::zeros();
    let mut g = Vector6::zeros();
    for ((p, c), wp) in planes.iter().zip(&w.planes) {
        let r = plane_residual(pose, p, c);
        let j = plane_jacobian(pose, c);
        for k in 0..3 {
            let row = j.row(k).transpose();
            let s = alpha.alpha_plane * wp[k];
            h += row * row.transpose() * s;
            g += row * (s * r[k]);
        }
    }
    for ((p, c), wc) in cylinders.iter().zip(&w.cylinders) {
        let r = cylinder_residual(pose, p, c);
        let j = cylinder_jacobian(pose, p, c);
        for k in 0..6 {
            let row = j.row(k).transpose();
            let s = alpha.alpha_cylinder * wc[k];
            h += row * row.transpose() * s;
            g += row * (s * r[k]);
        }
    }
    (h, g)
}

fn null_directions(h: &Matrix6<f64>, tol: f64) -> Vec<[f64; 6]> {
    let eig = SymmetricEigen::new(*h);
    let max = eig.eigenvalues.amax();
    (0..6)
        .filter(|&k| !(max > 0.0) || eig.eigenvalues[k] <= tol * max)
        .map(|k| {
            let v = eig.eigenvectors.column(k);
            [v[0], v[1], v[2], v[3], v[4], v[5]]
        })
        .collect()
}

/// Minimizes the weighted plane and cylinder cost from `init`. Fails with
/// `UnderConstrained` when the matches do not fix all six degrees of freedom.
pub fn estimate_pose(
    planes: &[PlanePair],
    cylinders: &[CylinderPair],
    init: &Pose,
    cfg: &PoseConfig,
) -> Result<PoseEstimate> {
    cfg.validate()?;
    let alpha = &cfg.weights;
    let mut pose = *init;
    let mut iterations = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_iterations {
        let w = weights_at(&pose, planes, cylinders, cfg.var_floor);
        let (h, g) = normal_equations(&pose, planes, cylinders, &w, alpha);
        let null = null_directions(&h, cfg.rank_tol);
        if !null.is_empty() {
            return Err(Error::UnderConstrained { null_directions: null });
        }
        let step = h
            .cholesky()
            .ok_or_else(|| Error::RankDeficient("pose normal matrix is not positive definite".into()))?
            .solve(&-g);
        let before = cost(&pose, planes, cylinders, &w, alpha);
        let mut scale = 1.0;
        let mut halvings = 0;
        let mut accepted = None;
        loop {
            let cand = pose.retract(&(step * scale));
            let after = cost(&cand, planes, cylinders, &w, alpha);
            if after <= before {
                accepted = Some((cand, after));
                break;
            }
            if halvings == cfg.max_halvings {
                break;
            }
            scale *= 0.5;
            halvings += 1;
        }
        let step_norm = step.norm() * scale;
        match accepted {
            Some((cand, after)) => {
                pose = cand;
                iterations.push(IterationDiagnostics {
                    cost_before: before,
                    cost_after: after,
                    step_norm,
                    halvings,
                });
                if step_norm < cfg.step_tol {
                    converged = true;
                    break;
                }
            }
            None => {
                // No descent along the Gauss-Newton direction: stationary to precision.
                converged = true;
                break;
            }
        }
    }
    let w = weights_at(&pose, planes, cylinders, cfg.var_floor);
    Ok(PoseEstimate {
        pose,
        cost: cost(&pose, planes, cylinders, &w, alpha),
        converged,
        iterations,
    })
}

/// Index pairs of the matches used by [`estimate_frame_pose`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FrameMatches {
    pub planes: Vec<(usize, usize)>,
    pub cylinders: Vec<(usize, usize)>,
}

/// Matches `prev` and `curr` by segment overlap and estimates `curr → prev`
/// from the identity.
pub fn estimate_frame_pose(
    prev: &Frame,
    curr: &Frame,
    match_cfg: &MatchConfig,
    cfg: &PoseConfig,
) -> Result<(PoseEstimate, FrameMatches)> {
    match_cfg.validate()?;
    let overlap = Overlap::between(&prev.labels, &curr.labels)?;
    let matches = FrameMatches {
        planes: match_planes(&prev.planes, &curr.planes, &overlap, match_cfg),
        cylinders: match_cylinders(&prev.cylinders, &curr.cylinders, &overlap, match_cfg),
    };
    let planes: Vec<PlanePair> = matches.planes.iter().map(|&(i, j)| (&prev.planes[i], &curr.planes[j])).collect();
    let cylinders: Vec<CylinderPair> = matches
        .cylinders
        .iter()
        .map(|&(i, j)| (&prev.cylinders[i], &curr.cylinders[j]))
        .collect();
    let est = estimate_pose(&planes, &cylinders, &Pose::identity(), cfg)?;
    Ok((est, matches))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix4, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane(n: Vector3<f64>, d: f64) -> PlaneFeature {
        PlaneFeature {
            label: 1,
            normal: n.normalize(),
            d,
            cov: Matrix4::identity() * 1e-6,
        }
    }

    fn cyl(a: Vector3<f64>, b: Vector3<f64>) -> CylinderFeature {
        CylinderFeature {
            label: 1,
            a,
            b,
            radius: 0.4,
            var_r: 1e-6,
            endpoint_cov: Matrix6::identity() * 1e-6,
        }
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let dir = |rng: &mut ChaCha8Rng| {
            Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize()
        };
        let angle = rng.random_range(0.0..20f64.to_radians());
        let dist = rng.random_range(0.0..0.3);
        Pose::from_axis_angle(dir(rng) * angle, dir(rng) * dist)
    }

    fn pairs<'a, T>(prev: &'a [T], curr: &'a [T]) -> Vec<(&'a T, &'a T)> {
        prev.iter().zip(curr).collect()
    }

    fn corner() -> Vec<PlaneFeature> {
        vec![
            plane(Vector3::new(0.0, 0.0, -1.0), 3.0),
            plane(Vector3::new(1.0, 0.0, 0.0), 1.0),
            plane(Vector3::new(0.0, -1.0, 0.0), 1.2),
        ]
    }

    #[test]
    fn three_orthogonal_planes_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let truth = random_pose(&mut rng);
            let prev = corner();
            let curr: Vec<_> = prev.iter().map(|p| p.expressed_in(&truth)).collect();
            let est = estimate_pose(&pairs(&prev, &curr), &[], &Pose::identity(), &PoseConfig::default()).unwrap();
            assert!(est.pose.rotation_angle_to(&truth) < 1e-8);
            assert!((est.pose.translation - truth.translation).norm() < 1e-8);
            assert!(est.converged);
        }
    }

    #[test]
    fn two_cylinders_and_plane_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let truth = random_pose(&mut rng);
            let prev_c = vec![
                cyl(Vector3::new(-0.5, -1.0, 2.5), Vector3::new(-0.5, 1.0, 2.5)),
                cyl(Vector3::new(-1.0, 0.3, 3.0), Vector3::new(1.0, 0.4, 3.2)),
            ];
            let prev_p = vec![plane(Vector3::new(0.0, 0.2, -1.0), 4.0)];
            let curr_c: Vec<_> = prev_c.iter().map(|c| c.expressed_in(&truth)).collect();
            let curr_p: Vec<_> = prev_p.iter().map(|p| p.expressed_in(&truth)).collect();
            let est = estimate_pose(&pairs(&prev_p, &curr_p), &pairs(&prev_c, &curr_c), &Pose::identity(), &PoseConfig::default())
                .unwrap();
            assert!(est.pose.rotation_angle_to(&truth) < 1e-6);
            assert!((est.pose.translation - truth.translation).norm() < 1e-6);
        }
    }

    #[test]
    fn degenerate_configurations_detected() {
        let err = estimate_pose(&[], &[], &Pose::identity(), &PoseConfig::default()).unwrap_err();
        assert!(matches!(err, Error::UnderConstrained { ref null_directions } if null_directions.len() == 6));
        let walls = vec![plane(Vector3::new(0.0, 0.0, -1.0), 3.0), plane(Vector3::new(0.0, 0.0, -1.0), 2.0)];
        let err = estimate_pose(&pairs(&walls, &walls), &[], &Pose::identity(), &PoseConfig::default()).unwrap_err();
        // Parallel planes leave rotation about N and both in-plane translations free.
        match err {
            Error::UnderConstrained { null_directions } => {
                assert_eq!(null_directions.len(), 3);
                let about_z = null_directions.iter().any(|v| v[2].abs() > 0.99);
                assert!(about_z);
            }
            e => panic!("unexpected {e:?}"),
        }
        let one = vec![cyl(Vector3::new(0.0, -1.0, 2.0), Vector3::new(0.0, 1.0, 2.0))];
        let err = estimate_pose(&[], &pairs(&one, &one), &Pose::identity(), &PoseConfig::default()).unwrap_err();
        assert!(matches!(err, Error::UnderConstrained { ref null_directions } if null_directions.len() == 2));
    }

    #[test]
    fn cost_non_increasing_per_iteration() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = random_pose(&mut rng);
        let prev = corner();
        let curr: Vec<_> = prev
            .iter()
            .map(|p| {
                let mut q = p.expressed_in(&truth);
                q.d += rng.random_range(-0.01..0.01);
                q
            })
            .collect();
        let est = estimate_pose(&pairs(&prev, &curr), &[], &Pose::identity(), &PoseConfig::default()).unwrap();
        assert!(!est.iterations.is_empty());
        for it in &est.iterations {
            assert!(it.cost_after <= it.cost_before);
        }
    }

    #[test]
    fn common_alpha_scale_leaves_pose_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let truth = random_pose(&mut rng);
        let prev_c = vec![
            cyl(Vector3::new(-0.5, -1.0, 2.5), Vector3::new(-0.5, 1.0, 2.5)),
            cyl(Vector3::new(-1.0, 0.3, 3.0), Vector3::new(1.0, 0.4, 3.2)),
        ];
        let prev_p = corner();
        let mut curr_c: Vec<_> = prev_c.iter().map(|c| c.expressed_in(&truth)).collect();
        curr_c[0].a.x += 0.01;
        let curr_p: Vec<_> = prev_p.iter().map(|p| p.expressed_in(&truth)).collect();
        let run = |k: f64| {
            let cfg = PoseConfig {
                weights: PoseWeights {
                    alpha_plane: 0.01 * k,
                    alpha_cylinder: 0.1 * k,
                },
                ..Default::default()
            };
            estimate_pose(&pairs(&prev_p, &curr_p), &pairs(&prev_c, &curr_c), &Pose::identity(), &cfg).unwrap()
        };
        let (a, b) = (run(1.0), run(37.0));
        assert!(a.pose.rotation_angle_to(&b.pose) < 1e-10);
        assert!((a.pose.translation - b.pose.translation).norm() < 1e-10);
    }
}
