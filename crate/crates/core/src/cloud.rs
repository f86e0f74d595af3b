//! Depth images, pinhole intrinsics and organized point clouds.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Pinhole intrinsics plus the metric scale of stored depth values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Meters per stored depth unit.
    pub depth_scale: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, depth_scale: f64) -> Result<Self> {
        let intr = Self {
            fx,
            fy,
            cx,
            cy,
            depth_scale,
        };
        intr.validate()?;
        Ok(intr)
    }

    /// Kinect-class VGA defaults (fx = fy = 525, principal point at the image center).
    pub fn vga() -> Self {
        Self {
            fx: 525.0,
            fy: 525.0,
            cx: 319.5,
            cy: 239.5,
            depth_scale: 0.001,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.depth_scale]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("intrinsics must be finite".into()));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if self.depth_scale <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "depth_scale must be positive, got {}",
                self.depth_scale
            )));
        }
        Ok(())
    }

    /// Viewing ray through pixel `(u, v)` scaled so that its Z component is 1.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Parses `key = value` lines (`:` or whitespace also separate); `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut vals: [Option<f64>; 5] = [None; 5];
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once(['=', ':'])
                .or_else(|| line.split_once(char::is_whitespace))
                .ok_or_else(|| Error::parse(lineno + 1, format!("expected key=value, got {line:?}")))?;
            let value: f64 = value.trim().parse().map_err(|_| {
                Error::parse(lineno + 1, format!("invalid number {:?}", value.trim()))
            })?;
            let slot = match key.trim() {
                "fx" => 0,
                "fy" => 1,
                "cx" => 2,
                "cy" => 3,
                "depth_scale" => 4,
                other => return Err(Error::parse(lineno + 1, format!("unknown key {other:?}"))),
            };
            vals[slot] = Some(value);
        }
        let get = |i: usize, name: &str| {
            vals[i].ok_or_else(|| Error::InvalidInput(format!("intrinsics missing key {name}")))
        };
        Self::new(
            get(0, "fx")?,
            get(1, "fy")?,
            get(2, "cx")?,
            get(3, "cy")?,
            vals[4].unwrap_or(0.001),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

impl fmt::Display for Intrinsics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "fx = {}", self.fx)?;
        writeln!(f, "fy = {}", self.fy)?;
        writeln!(f, "cx = {}", self.cx)?;
        writeln!(f, "cy = {}", self.cy)?;
        writeln!(f, "depth_scale = {}", self.depth_scale)
    }
}

/// Row-major depth raster. Values are either raw sensor units (`u16`) or meters (`f64`).
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> DepthImage<T> {
    pub fn new(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput("depth image dimensions must be positive".into()));
        }
        if data.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "depth buffer length {} does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn get(&self, u: usize, v: usize) -> T {
        self.data[v * self.width + u]
    }
}

impl DepthImage<u16> {
    /// Converts stored units to meters; stored 0 stays 0 (invalid).
    pub fn to_meters(&self, depth_scale: f64) -> DepthImage<f64> {
        DepthImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&d| d as f64 * depth_scale).collect(),
        }
    }
}

impl DepthImage<f64> {
    /// Quantizes metric depth to stored units. Non-finite, non-positive or
    /// out-of-range values become 0 (invalid).
    pub fn to_units(&self, depth_scale: f64) -> DepthImage<u16> {
        let data = self
            .data
            .iter()
            .map(|&z| {
                if !(z.is_finite() && z > 0.0) {
                    return 0;
                }
                let q = (z / depth_scale).round();
                if q >= 1.0 && q <= u16::MAX as f64 {
                    q as u16
                } else {
                    0
                }
            })
            .collect();
        DepthImage {
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// 3D points in the image lattice of the sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OrganizedCloud {
    pub width: usize,
    pub height: usize,
    /// Row-major; invalid pixels hold the zero vector.
    pub points: Vec<Vector3<f64>>,
    pub valid: Vec<bool>,
}

impl OrganizedCloud {
    #[inline]
    pub fn index(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    #[inline]
    pub fn point(&self, u: usize, v: usize) -> Option<&Vector3<f64>> {
        let i = self.index(u, v);
        self.valid[i].then(|| &self.points[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

/// Back-projects a metric depth map. Zero, negative and non-finite depths are invalid.
pub fn backproject(depth: &DepthImage<f64>, intr: &Intrinsics) -> Result<OrganizedCloud> {
    intr.validate()?;
    check_dimensions(depth.width, depth.height, depth.data.len(), intr)?;
    let mut points = Vec::with_capacity(depth.data.len());
    let mut valid = Vec::with_capacity(depth.data.len());
    for v in 0..depth.height {
        let ry = (v as f64 - intr.cy) / intr.fy;
        for u in 0..depth.width {
            let z = depth.data[v * depth.width + u];
            if z.is_finite() && z > 0.0 {
                let rx = (u as f64 - intr.cx) / intr.fx;
                points.push(Vector3::new(rx * z, ry * z, z));
                valid.push(true);
            } else {
                points.push(Vector3::zeros());
                valid.push(false);
            }
        }
    }
    Ok(OrganizedCloud {
        width: depth.width,
        height: depth.height,
        points,
        valid,
    })
}

/// Back-projects a raw sensor depth image using `intr.depth_scale`.
pub fn backproject_units(depth: &DepthImage<u16>, intr: &Intrinsics) -> Result<OrganizedCloud> {
    backproject(&depth.to_meters(intr.depth_scale), intr)
}

fn check_dimensions(width: usize, height: usize, len: usize, intr: &Intrinsics) -> Result<()> {
    if width == 0 || height == 0 || len != width * height {
        return Err(Error::InvalidInput(format!(
            "depth image {width}x{height} with {len} samples"
        )));
    }
    // A principal point outside the image means the intrinsics belong to a
    // different resolution.
    if intr.cx < 0.0 || intr.cx > width as f64 || intr.cy < 0.0 || intr.cy > height as f64 {
        return Err(Error::InvalidInput(format!(
            "principal point ({}, {}) outside {width}x{height} image",
            intr.cx, intr.cy
        )));
    }
    Ok(())
}

/// Standard depth uncertainty as a function of depth: `σ(z) = coeff · z²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthNoiseModel {
    pub coeff: f64,
}

impl Default for DepthNoiseModel {
    fn default() -> Self {
        Self { coeff: 1.425e-3 }
    }
}

impl DepthNoiseModel {
    pub fn sigma(&self, z: f64) -> f64 {
        self.coeff * z * z
    }

    /// Diagonal covariance of a back-projected point: Z variance from the
    /// model, X and Y variances scaled by the ray slope.
    pub fn point_covariance(&self, p: &Vector3<f64>) -> Matrix3<f64> {
        let var_z = self.sigma(p.z).powi(2);
        let sx = p.x / p.z;
        let sy = p.y / p.z;
        Matrix3::from_diagonal(&Vector3::new(sx * sx * var_z, sy * sy * var_z, var_z))
    }
}
