//! Synthetic ground-truth scenes rendered by ray casting.
//!
//! Scene descriptions are plain text, one primitive per record:
//!
//! ```text
//! plane N=(0,0,-1) d=2
//! cylinder axis=(1,0,0) center=(0,0,2) r=0.5
//! sphere center=(0,0,2) r=0.5
//! ```
//!
//! Planes satisfy `N·p + d = 0`. Cylinders are infinite surfaces. The camera
//! sits at the origin looking down +Z; each pixel takes the nearest hit.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::cloud::{DepthImage, Intrinsics};
use crate::error::{Error, Result};
use crate::text::{fmt_f64, fmt_tuple, parse_records};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScenePrimitive {
    Plane {
        normal: Vector3<f64>,
        d: f64,
    },
    Cylinder {
        axis: Vector3<f64>,
        center: Vector3<f64>,
        radius: f64,
    },
    Sphere {
        center: Vector3<f64>,
        radius: f64,
    },
}

impl ScenePrimitive {
    pub fn plane(normal: Vector3<f64>, d: f64) -> Self {
        let n = normal.norm();
        ScenePrimitive::Plane {
            normal: normal / n,
            d: d / n,
        }
    }

    pub fn cylinder(axis: Vector3<f64>, center: Vector3<f64>, radius: f64) -> Self {
        ScenePrimitive::Cylinder {
            axis: axis.normalize(),
            center,
            radius,
        }
    }

    pub fn sphere(center: Vector3<f64>, radius: f64) -> Self {
        ScenePrimitive::Sphere { center, radius }
    }

    /// Ray parameter of the nearest forward hit of `origin + s·dir`.
    pub fn intersect(&self, dir: &Vector3<f64>) -> Option<f64> {
        match *self {
            ScenePrimitive::Plane { normal, d } => {
                let denom = normal.dot(dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let s = -d / denom;
                (s > 0.0).then_some(s)
            }
            ScenePrimitive::Cylinder {
                axis,
                center,
                radius,
            } => {
                let w = dir - axis * axis.dot(dir);
                let c = center - axis * axis.dot(&center);
                nearest_positive_root(w.norm_squared(), -2.0 * w.dot(&c), c.norm_squared() - radius * radius)
            }
            ScenePrimitive::Sphere { center, radius } => nearest_positive_root(
                dir.norm_squared(),
                -2.0 * dir.dot(&center),
                center.norm_squared() - radius * radius,
            ),
        }
    }

    /// Unsigned distance from `p` to the surface.
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        match *self {
            ScenePrimitive::Plane { normal, d } => (normal.dot(p) + d).abs(),
            ScenePrimitive::Cylinder {
                axis,
                center,
                radius,
            } => {
                let q = p - center;
                ((q - axis * axis.dot(&q)).norm() - radius).abs()
            }
            ScenePrimitive::Sphere { center, radius } => ((p - center).norm() - radius).abs(),
        }
    }

    /// Re-expresses the primitive in a frame where old points map to `R p + t`.
    pub fn transformed(&self, rot: &Matrix3<f64>, t: &Vector3<f64>) -> Self {
        match *self {
            ScenePrimitive::Plane { normal, d } => {
                let n = rot * normal;
                ScenePrimitive::Plane { normal: n, d: d - n.dot(t) }
            }
            ScenePrimitive::Cylinder {
                axis,
                center,
                radius,
            } => ScenePrimitive::Cylinder {
                axis: rot * axis,
                center: rot * center + t,
                radius,
            },
            ScenePrimitive::Sphere { center, radius } => ScenePrimitive::Sphere {
                center: rot * center + t,
                radius,
            },
        }
    }
}

fn nearest_positive_root(a: f64, b: f64, c: f64) -> Option<f64> {
    if a < 1e-15 {
        return None;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    // Numerically stable pair of roots.
    let q = -0.5 * (b + b.signum() * sq);
    let (mut r0, mut r1) = if q != 0.0 { (q / a, c / q) } else { (0.0, 0.0) };
    if r0 > r1 {
        std::mem::swap(&mut r0, &mut r1);
    }
    if r0 > 0.0 {
        Some(r0)
    } else if r1 > 0.0 {
        Some(r1)
    } else {
        None
    }
}

impl fmt::Display for ScenePrimitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenePrimitive::Plane { normal, d } => write!(
                f,
                "plane N={} d={}",
                fmt_tuple(normal.as_slice()),
                fmt_f64(*d)
            ),
            ScenePrimitive::Cylinder {
                axis,
                center,
                radius,
            } => write!(
                f,
                "cylinder axis={} center={} r={}",
                fmt_tuple(axis.as_slice()),
                fmt_tuple(center.as_slice()),
                fmt_f64(*radius)
            ),
            ScenePrimitive::Sphere { center, radius } => write!(
                f,
                "sphere center={} r={}",
                fmt_tuple(center.as_slice()),
                fmt_f64(*radius)
            ),
        }
    }
}

/// Parses a scene description.
pub fn parse_scene(text: &str) -> Result<Vec<ScenePrimitive>> {
    let mut out = Vec::new();
    for rec in parse_records(text)? {
        let prim = match rec.kind.as_str() {
            "plane" => {
                let n = rec.vector3(&["N", "normal"])?;
                let d = rec.number(&["d"])?;
                if n.norm() < 1e-12 {
                    return Err(Error::parse(rec.line, "plane normal must be nonzero"));
                }
                ScenePrimitive::plane(n, d)
            }
            "cylinder" => {
                let axis = rec.vector3(&["axis"])?;
                let center = rec.vector3(&["center"])?;
                let r = rec.number(&["r", "radius"])?;
                if axis.norm() < 1e-12 {
                    return Err(Error::parse(rec.line, "cylinder axis must be nonzero"));
                }
                if !(r > 0.0) {
                    return Err(Error::parse(rec.line, "cylinder radius must be positive"));
                }
                ScenePrimitive::cylinder(axis, center, r)
            }
            "sphere" => {
                let center = rec.vector3(&["center"])?;
                let r = rec.number(&["r", "radius"])?;
                if !(r > 0.0) {
                    return Err(Error::parse(rec.line, "sphere radius must be positive"));
                }
                ScenePrimitive::sphere(center, r)
            }
            other => return Err(Error::parse(rec.line, format!("unknown primitive {other:?}"))),
        };
        out.push(prim);
    }
    Ok(out)
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Vec<ScenePrimitive>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene(&text)
}

pub fn format_scene(prims: &[ScenePrimitive]) -> String {
    prims.iter().map(|p| format!("{p}\n")).collect()
}

/// Additive Gaussian depth noise.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum NoiseModel {
    #[default]
    None,
    /// Constant standard deviation in meters.
    Constant(f64),
    /// `σ(z) = s0 · z²`.
    Quadratic(f64),
}

impl NoiseModel {
    pub fn sigma(&self, z: f64) -> f64 {
        match *self {
            NoiseModel::None => 0.0,
            NoiseModel::Constant(s) => s,
            NoiseModel::Quadratic(s0) => s0 * z * z,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub primitives: Vec<ScenePrimitive>,
    /// Metric depth, 0 where no primitive is hit.
    pub depth: DepthImage<f64>,
    pub noise: NoiseModel,
}

/// Ray-casts `prims` at `intr`; noise is drawn from a ChaCha stream seeded with `seed`.
pub fn render_scene(
    prims: &[ScenePrimitive],
    intr: &Intrinsics,
    (width, height): (usize, usize),
    noise: NoiseModel,
    seed: u64,
) -> Result<SyntheticScene> {
    intr.validate()?;
    if width == 0 || height == 0 {
        return Err(Error::InvalidInput("render size must be positive".into()));
    }
    let mut data = vec![0.0; width * height];
    for v in 0..height {
        for u in 0..width {
            let dir = intr.ray(u as f64, v as f64);
            let hit = prims
                .iter()
                .filter_map(|p| p.intersect(&dir))
                .min_by(f64::total_cmp);
            if let Some(z) = hit {
                data[v * width + u] = z;
            }
        }
    }
    let mut depth = DepthImage::new(width, height, data)?;
    add_noise(&mut depth, noise, seed);
    Ok(SyntheticScene {
        primitives: prims.to_vec(),
        depth,
        noise,
    })
}

/// Perturbs valid depths in place. Samples are clamped to stay positive so
/// the validity mask never changes.
pub fn add_noise(depth: &mut DepthImage<f64>, noise: NoiseModel, seed: u64) {
    if noise == NoiseModel::None {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for z in depth.data.iter_mut() {
        if *z > 0.0 {
            let n: f64 = StandardNormal.sample(&mut rng);
            *z = (*z + noise.sigma(*z) * n).max(1e-3 * *z);
        }
    }
}
