//! Frame-to-frame primitive matching and relative pose estimation.
//!
//! Poses map current-frame points into the previous frame,
//! `p_prev = R·p_cur + t`.

pub mod estimate;
pub mod matching;
pub mod residuals;

use nalgebra::{Matrix3, Matrix4, Matrix6, Rotation3, UnitQuaternion, Vector3, Vector6};

use crate::error::{Error, Result};
use crate::fitting::{CylinderModel, PlaneModel};
use crate::refinement::SegmentLabelImage;

pub use estimate::{estimate_frame_pose, estimate_pose, FrameMatches, IterationDiagnostics, PoseConfig, PoseEstimate, PoseWeights};
pub use matching::{match_cylinders, match_planes, MatchConfig, Overlap};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Rotation3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation from a scaled axis (radians).
    pub fn from_axis_angle(omega: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::new(omega),
            translation,
        }
    }

    /// Normalizes `q`; fails on a zero quaternion.
    pub fn from_quaternion(q: [f64; 4], translation: Vector3<f64>) -> Result<Self> {
        let v = nalgebra::Quaternion::new(q[3], q[0], q[1], q[2]);
        if !(v.norm() > 1e-12) {
            return Err(Error::InvalidInput("zero quaternion".into()));
        }
        Ok(Self {
            rotation: UnitQuaternion::from_quaternion(v).to_rotation_matrix(),
            translation,
        })
    }

    pub fn r(&self) -> &Matrix3<f64> {
        self.rotation.matrix()
    }

    /// `[qx, qy, qz, qw]` with `qw ≥ 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&self.rotation);
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.i, s * q.j, s * q.k, s * q.w]
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.inverse();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `exp([ω]×)·R`, `t + δt` for `δ = (ω, δt)`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Self {
        let omega = Vector3::new(delta[0], delta[1], delta[2]);
        let mut rotation = Rotation3::new(omega) * self.rotation;
        rotation.renormalize();
        Self {
            rotation,
            translation: self.translation + Vector3::new(delta[3], delta[4], delta[5]),
        }
    }

    /// Angle of `self.R · other.Rᵀ` in radians.
    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        let m = (self.rotation * other.rotation.inverse()).into_inner();
        let sin = Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]).norm() * 0.5;
        let cos = (m.trace() - 1.0) * 0.5;
        sin.atan2(cos)
    }
}

/// Plane `N·p + d = 0` with the covariance of `(N, d)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneFeature {
    /// Segment label in the frame's label image.
    pub label: u32,
    pub normal: Vector3<f64>,
    pub d: f64,
    pub cov: Matrix4<f64>,
}

impl PlaneFeature {
    pub fn from_model(label: u32, m: &PlaneModel, cov: Matrix4<f64>) -> Self {
        Self {
            label,
            normal: m.normal,
            d: m.d,
            cov,
        }
    }

    /// The same plane in the frame `pose` maps from (`p = R·p' + t`).
    pub fn expressed_in(&self, pose: &Pose) -> Self {
        let rt = pose.rotation.inverse();
        let normal = rt * self.normal;
        let d = self.d + self.normal.dot(&pose.translation);
        let mut j = Matrix4::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(rt.matrix());
        j.fixed_view_mut::<1, 3>(3, 0).copy_from(&pose.translation.transpose());
        j[(3, 3)] = 1.0;
        Self {
            label: self.label,
            normal,
            d,
            cov: j * self.cov * j.transpose(),
        }
    }
}

/// Cylinder axis segment `A → B` with radius, radius variance and the joint
/// covariance of `(A, B)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CylinderFeature {
    pub label: u32,
    pub a: Vector3<f64>,
    pub b: Vector3<f64>,
    pub radius: f64,
    pub var_r: f64,
    pub endpoint_cov: Matrix6<f64>,
}

impl CylinderFeature {
    /// Fails when the model carries no uncertainty.
    pub fn from_model(label: u32, m: &CylinderModel) -> Result<Self> {
        let u = m
            .uncertainty
            .as_ref()
            .ok_or_else(|| Error::ContractViolation("cylinder feature needs a refined model".into()))?;
        Ok(Self {
            label,
            a: m.a,
            b: m.b,
            radius: m.radius,
            var_r: u.var_r,
            endpoint_cov: u.endpoint_covariance(),
        })
    }

    pub fn axis(&self) -> Vector3<f64> {
        (self.b - self.a).normalize()
    }

    pub fn expressed_in(&self, pose: &Pose) -> Self {
        let inv = pose.inverse();
        let rt = *inv.rotation.matrix();
        let mut j = Matrix6::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&rt);
        j.fixed_view_mut::<3, 3>(3, 3).copy_from(&rt);
        Self {
            a: inv.apply(&self.a),
            b: inv.apply(&self.b),
            endpoint_cov: j * self.endpoint_cov * j.transpose(),
            ..*self
        }
    }
}

/// Primitives of one frame with their segment label image.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub planes: Vec<PlaneFeature>,
    pub cylinders: Vec<CylinderFeature>,
    pub labels: SegmentLabelImage,
}
