//! Flags overriding every pipeline and odometry configuration value. Unset
//! flags keep the library defaults.

use clap::{Args, ValueEnum};
use primex_core::odometry::{MatchConfig, PoseConfig};
use primex_core::prob_cylinder::ResidualWeights;
use primex_core::ExtractConfig;

#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// Cell size in pixels.
    #[arg(long, env = "PRIMEX_PATCH")]
    pub patch: Option<usize>,
    /// RANSAC base seed.
    #[arg(long, env = "PRIMEX_SEED")]
    pub seed: Option<u64>,
    /// Run cell fitting and segment fitting on all cores.
    #[arg(long, env = "PRIMEX_PARALLEL")]
    pub parallel: bool,
    /// Depth noise σ_z = coeff · z² used by the planarity bound and the cylinder refit.
    #[arg(long, env = "PRIMEX_NOISE_COEFF")]
    pub noise_coeff: Option<f64>,
    #[arg(long, env = "PRIMEX_MISSING_FRACTION_MAX")]
    pub missing_fraction_max: Option<f64>,
    #[arg(long, env = "PRIMEX_DISCONTINUITY_RATIO")]
    pub discontinuity_ratio: Option<f64>,
    /// Planarity tolerance added to σ_z (meters).
    #[arg(long, env = "PRIMEX_EPSILON")]
    pub epsilon: Option<f64>,
    #[arg(long, env = "PRIMEX_POLAR_BINS")]
    pub polar_bins: Option<usize>,
    #[arg(long, env = "PRIMEX_AZIMUTH_BINS")]
    pub azimuth_bins: Option<usize>,
    /// Minimum normal dot product when growing.
    #[arg(long, env = "PRIMEX_GROW_NORMAL_DOT")]
    pub grow_normal_dot: Option<f64>,
    /// Stop growing once the dominant bin holds fewer cells.
    #[arg(long, env = "PRIMEX_K1")]
    pub k1: Option<usize>,
    /// Minimum segment size in cells.
    #[arg(long, env = "PRIMEX_K2")]
    pub k2: Option<usize>,
    /// Cap on the adaptive point-to-plane threshold (meters).
    #[arg(long, env = "PRIMEX_TD_CAP")]
    pub td_cap: Option<f64>,
    #[arg(long, env = "PRIMEX_PLANE_MIN_SCORE")]
    pub plane_min_score: Option<f64>,
    #[arg(long, env = "PRIMEX_EXTRUSION_MIN_SCORE")]
    pub extrusion_min_score: Option<f64>,
    #[arg(long, env = "PRIMEX_MERGE_NORMAL_DOT")]
    pub merge_normal_dot: Option<f64>,
    #[arg(long, env = "PRIMEX_MERGE_OFFSET_MIN")]
    pub merge_offset_min: Option<f64>,
    #[arg(long, env = "PRIMEX_PIXEL_REFIT_ITERATIONS")]
    pub pixel_refit_iterations: Option<usize>,
    #[arg(long, env = "PRIMEX_RANSAC_ITERATIONS")]
    pub ransac_iterations: Option<usize>,
    #[arg(long, env = "PRIMEX_RANSAC_INLIER_REL_ERR")]
    pub ransac_inlier_rel_err: Option<f64>,
    #[arg(long, env = "PRIMEX_RANSAC_MIN_INLIERS")]
    pub ransac_min_inliers: Option<usize>,
    #[arg(long, env = "PRIMEX_SAG_ITERATIONS")]
    pub sag_iterations: Option<usize>,
    /// Band pixels need `dist² < factor · MSE`.
    #[arg(long, env = "PRIMEX_REFINE_FACTOR")]
    pub refine_factor: Option<f64>,
    #[arg(long, env = "PRIMEX_REFINE_MSE_FLOOR")]
    pub refine_mse_floor: Option<f64>,
    /// Pixel lattice step of the cylinder refit.
    #[arg(long, env = "PRIMEX_CYLINDER_SUBSAMPLE")]
    pub cylinder_subsample: Option<usize>,
    #[arg(long, env = "PRIMEX_LM_INITIAL_DAMPING")]
    pub lm_initial_damping: Option<f64>,
    #[arg(long, env = "PRIMEX_LM_MAX_ITERATIONS")]
    pub lm_max_iterations: Option<usize>,
    #[arg(long, env = "PRIMEX_LM_REL_COST_TOL")]
    pub lm_rel_cost_tol: Option<f64>,
    #[arg(long, env = "PRIMEX_LM_STEP_TOL")]
    pub lm_step_tol: Option<f64>,
    /// Residual weights of the cylinder refit.
    #[arg(long, env = "PRIMEX_CYLINDER_WEIGHTS", value_enum)]
    pub cylinder_weights: Option<CylinderWeights>,
    /// Keep direct cylinder fits; records then carry no uncertainty.
    #[arg(long, env = "PRIMEX_SKIP_CYLINDER_REFINEMENT")]
    pub skip_cylinder_refinement: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CylinderWeights {
    /// Inverse depth variance of each point.
    Depth,
    /// Inverse residual variance propagated from the point covariance.
    Propagated,
}

impl From<CylinderWeights> for ResidualWeights {
    fn from(w: CylinderWeights) -> Self {
        match w {
            CylinderWeights::Depth => ResidualWeights::DepthVariance,
            CylinderWeights::Propagated => ResidualWeights::Propagated,
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl PipelineArgs {
    pub fn config(&self) -> ExtractConfig {
        let mut c = ExtractConfig::default().with_parallel(self.parallel);
        set(&mut c.cells.patch_size, self.patch);
        set(&mut c.fit.seed, self.seed);
        set(&mut c.cells.noise.coeff, self.noise_coeff);
        set(&mut c.cylinder.noise.coeff, self.noise_coeff);
        set(&mut c.cells.missing_fraction_max, self.missing_fraction_max);
        set(&mut c.cells.discontinuity_ratio, self.discontinuity_ratio);
        set(&mut c.cells.epsilon, self.epsilon);
        set(&mut c.histogram.polar_bins, self.polar_bins);
        set(&mut c.histogram.azimuth_bins, self.azimuth_bins);
        set(&mut c.grow.t_n, self.grow_normal_dot);
        set(&mut c.grow.k1, self.k1);
        set(&mut c.grow.k2, self.k2);
        set(&mut c.grow.td_cap, self.td_cap);
        set(&mut c.fit.plane_min_score, self.plane_min_score);
        set(&mut c.fit.extrusion_min_score, self.extrusion_min_score);
        set(&mut c.fit.merge_normal_dot, self.merge_normal_dot);
        set(&mut c.fit.merge_offset_min, self.merge_offset_min);
        set(&mut c.fit.pixel_refit_iterations, self.pixel_refit_iterations);
        set(&mut c.fit.ransac.iterations, self.ransac_iterations);
        set(&mut c.fit.ransac.inlier_rel_err, self.ransac_inlier_rel_err);
        set(&mut c.fit.ransac.min_inliers, self.ransac_min_inliers);
        set(&mut c.fit.ransac.sag_iterations, self.sag_iterations);
        set(&mut c.refine.factor, self.refine_factor);
        set(&mut c.refine.mse_floor, self.refine_mse_floor);
        set(&mut c.cylinder.subsample_step, self.cylinder_subsample);
        set(&mut c.cylinder.lm.initial_damping, self.lm_initial_damping);
        set(&mut c.cylinder.lm.max_iterations, self.lm_max_iterations);
        set(&mut c.cylinder.lm.rel_cost_tol, self.lm_rel_cost_tol);
        set(&mut c.cylinder.lm.step_tol, self.lm_step_tol);
        set(&mut c.cylinder.weights, self.cylinder_weights.map(Into::into));
        c.skip_cylinder_refinement = self.skip_cylinder_refinement;
        c
    }
}

#[derive(Debug, Clone, Args)]
pub struct OdometryArgs {
    #[arg(long, env = "PRIMEX_ALPHA_PLANE")]
    pub alpha_plane: Option<f64>,
    #[arg(long, env = "PRIMEX_ALPHA_CYLINDER")]
    pub alpha_cylinder: Option<f64>,
    #[arg(long, env = "PRIMEX_POSE_MAX_ITERATIONS")]
    pub pose_max_iterations: Option<usize>,
    #[arg(long, env = "PRIMEX_POSE_STEP_TOL")]
    pub pose_step_tol: Option<f64>,
    #[arg(long, env = "PRIMEX_POSE_VAR_FLOOR")]
    pub pose_var_floor: Option<f64>,
    /// Normal-matrix eigenvalues below `rank_tol · λ_max` are null directions.
    #[arg(long, env = "PRIMEX_POSE_RANK_TOL")]
    pub pose_rank_tol: Option<f64>,
    #[arg(long, env = "PRIMEX_POSE_MAX_HALVINGS")]
    pub pose_max_halvings: Option<usize>,
    /// Cylinder axis gate (degrees).
    #[arg(long, env = "PRIMEX_MAX_AXIS_ANGLE_DEG")]
    pub max_axis_angle_deg: Option<f64>,
    #[arg(long, env = "PRIMEX_MAX_RADIUS_MAHALANOBIS")]
    pub max_radius_mahalanobis: Option<f64>,
    #[arg(long, env = "PRIMEX_MIN_OVERLAP_RATIO")]
    pub min_overlap_ratio: Option<f64>,
    /// Plane normal gate (degrees).
    #[arg(long, env = "PRIMEX_MAX_NORMAL_ANGLE_DEG")]
    pub max_normal_angle_deg: Option<f64>,
    /// Plane offset gate (meters).
    #[arg(long, env = "PRIMEX_MAX_PLANE_OFFSET")]
    pub max_plane_offset: Option<f64>,
}

impl OdometryArgs {
    pub fn configs(&self) -> (MatchConfig, PoseConfig) {
        let mut m = MatchConfig::default();
        set(&mut m.max_axis_angle, self.max_axis_angle_deg.map(f64::to_radians));
        set(&mut m.max_radius_mahalanobis, self.max_radius_mahalanobis);
        set(&mut m.min_overlap_ratio, self.min_overlap_ratio);
        set(&mut m.max_normal_angle, self.max_normal_angle_deg.map(f64::to_radians));
        set(&mut m.max_plane_offset, self.max_plane_offset);
        let mut p = PoseConfig::default();
        set(&mut p.weights.alpha_plane, self.alpha_plane);
        set(&mut p.weights.alpha_cylinder, self.alpha_cylinder);
        set(&mut p.max_iterations, self.pose_max_iterations);
        set(&mut p.step_tol, self.pose_step_tol);
        set(&mut p.var_floor, self.pose_var_floor);
        set(&mut p.rank_tol, self.pose_rank_tol);
        set(&mut p.max_halvings, self.pose_max_halvings);
        (m, p)
    }
}
