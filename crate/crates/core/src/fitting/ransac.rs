//! Sequential MSAC over projected cell samples: fit one circle by 3-sample
//! hypotheses, remove its inliers, repeat on the remainder.

use nalgebra::Vector3;
use rand::seq::index::sample;
use rand::Rng;

use super::circle::{solve, solve_sag_corrected};
use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Inlier bound on `‖P' − rN' − C‖ / |r|`; also the MSAC truncation.
    pub inlier_rel_err: f64,
    pub min_inliers: usize,
    /// Fixed-point steps of the sag-corrected inlier refit; 0 disables it.
    pub sag_iterations: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            iterations: 64,
            inlier_rel_err: 0.15,
            min_inliers: 5,
            sag_iterations: 3,
        }
    }
}

/// Circle in the projection plane, or its infinite-radius limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CircleModel {
    Circle { signed_radius: f64, center: Vector3<f64> },
    /// All normals equal; relative error tends to `‖N' − n‖`.
    Flat { normal: Vector3<f64> },
}

impl CircleModel {
    #[inline]
    pub fn relative_error(&self, p: &Vector3<f64>, n: &Vector3<f64>) -> f64 {
        match *self {
            CircleModel::Circle { signed_radius, center } => {
                (p - n * signed_radius - center).norm() / signed_radius.abs()
            }
            CircleModel::Flat { normal } => (n - normal).norm(),
        }
    }

    pub fn radius(&self) -> f64 {
        match *self {
            CircleModel::Circle { signed_radius, .. } => signed_radius.abs(),
            CircleModel::Flat { .. } => f64::INFINITY,
        }
    }
}

fn hypothesis<I>(p: &[Vector3<f64>], n: &[Vector3<f64>], idx: I) -> Option<CircleModel>
where
    I: Iterator<Item = usize> + Clone,
{
    match solve(p, n, idx.clone()) {
        Ok((signed_radius, center)) => Some(CircleModel::Circle { signed_radius, center }),
        Err(Error::FlatSurface) => {
            let mean: Vector3<f64> = idx.map(|i| n[i]).sum();
            (mean.norm() > 0.0).then(|| CircleModel::Flat { normal: mean.normalize() })
        }
        Err(_) => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacModel {
    /// Sample indices, ascending.
    pub inliers: Vec<usize>,
    /// Refit over all inliers.
    pub model: CircleModel,
    /// Best minimal-sample hypothesis of the round.
    pub hypothesis: CircleModel,
    pub cost: f64,
}

/// Best-so-far MSAC cost after each hypothesis, one list per round.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RansacTrace {
    pub rounds: Vec<Vec<f64>>,
}

/// Runs rounds until fewer than `min_inliers` samples remain or the best
/// hypothesis has too few inliers. `active` lists the usable sample indices;
/// `tangential_var` enables the sag-corrected refit.
pub fn sequential_ransac<R: Rng>(
    p: &[Vector3<f64>],
    n: &[Vector3<f64>],
    active: &[usize],
    tangential_var: Option<&[f64]>,
    cfg: &RansacConfig,
    rng: &mut R,
) -> (Vec<RansacModel>, RansacTrace) {
    let t = cfg.inlier_rel_err;
    let t2 = t * t;
    let mut remaining: Vec<usize> = active.to_vec();
    let mut models = Vec::new();
    let mut trace = RansacTrace::default();
    while remaining.len() >= cfg.min_inliers.max(3) {
        let mut best: Option<(f64, CircleModel)> = None;
        let mut costs = Vec::with_capacity(cfg.iterations);
        for _ in 0..cfg.iterations {
            let pick = sample(rng, remaining.len(), 3);
            let idx = [remaining[pick.index(0)], remaining[pick.index(1)], remaining[pick.index(2)]];
            if let Some(h) = hypothesis(p, n, idx.into_iter()) {
                let cost: f64 = remaining
                    .iter()
                    .map(|&i| h.relative_error(&p[i], &n[i]).powi(2).min(t2))
                    .sum();
                if best.map_or(true, |(c, _)| cost < c) {
                    best = Some((cost, h));
                }
            }
            costs.push(best.map_or(f64::INFINITY, |b| b.0));
        }
        trace.rounds.push(costs);
        let Some((cost, h)) = best else { break };
        let inliers: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&i| h.relative_error(&p[i], &n[i]) < t)
            .collect();
        if inliers.len() < cfg.min_inliers {
            break;
        }
        let refit = match (tangential_var, &h) {
            (Some(var), CircleModel::Circle { .. }) if cfg.sag_iterations > 0 => {
                match solve_sag_corrected(p, n, var, &inliers, cfg.sag_iterations) {
                    Ok((signed_radius, center)) => Some(CircleModel::Circle { signed_radius, center }),
                    Err(_) => None,
                }
            }
            _ => None,
        };
        let model = refit
            .or_else(|| hypothesis(p, n, inliers.iter().copied()))
            .unwrap_or(h);
        remaining.retain(|i| inliers.binary_search(i).is_err());
        models.push(RansacModel { inliers, model, hypothesis: h, cost });
    }
    (models, trace)
}
