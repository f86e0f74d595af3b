//! Plain-text primitive records and pose lines.
//!
//! ```text
//! plane id=1 n=(nx,ny,nz) d=D mse=M cells=C pixels=P cov=(16 values, row-major over (N, d))
//! cylinder id=2 a=(..) b=(..) r=R mse=M cells=C pixels=P var_r=V gauge=G cov=(25 values over ξ)
//! ```
//!
//! The cylinder uncertainty fields are omitted when the model was not
//! refined. Numbers carry nine significant digits.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix4, Matrix5, Vector3};

use crate::cloud::DepthNoiseModel;
use crate::error::{Error, Result};
use crate::fitting::Primitive;
use crate::odometry::{CylinderFeature, Frame, PlaneFeature, Pose};
use crate::prob_cylinder::CylinderUncertainty;
use crate::refinement::SegmentLabelImage;
use crate::text::{fmt_f64, parse_records as parse_lines, Record};

#[derive(Debug, Clone, PartialEq)]
pub enum RecordShape {
    Plane {
        normal: Vector3<f64>,
        d: f64,
        cov: Matrix4<f64>,
    },
    Cylinder {
        a: Vector3<f64>,
        b: Vector3<f64>,
        radius: f64,
        uncertainty: Option<CylinderUncertainty>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveRecord {
    /// Label of the primitive in the frame's label image.
    pub id: u32,
    pub mse: f64,
    pub cells: usize,
    pub pixels: usize,
    pub shape: RecordShape,
}

fn tuple(values: impl IntoIterator<Item = f64>) -> String {
    let parts: Vec<String> = values.into_iter().map(fmt_f64).collect();
    format!("({})", parts.join(","))
}

fn vec3(v: &Vector3<f64>) -> String {
    tuple([v.x, v.y, v.z])
}

fn count(rec: &Record, key: &str) -> Result<usize> {
    let x = rec.number(&[key])?;
    if x < 0.0 || x.fract() != 0.0 || x > u32::MAX as f64 {
        return Err(Error::parse(rec.line, format!("{key} must be a non-negative integer")));
    }
    Ok(x as usize)
}

impl PrimitiveRecord {
    pub fn from_primitive(id: u32, p: &Primitive, pixels: usize, noise: &DepthNoiseModel) -> Self {
        match p {
            Primitive::Plane(m) => Self {
                id,
                mse: m.mse,
                cells: m.cells.len(),
                pixels,
                shape: RecordShape::Plane {
                    normal: m.normal,
                    d: m.d,
                    cov: m.parameter_covariance(noise),
                },
            },
            Primitive::Cylinder(m) => Self {
                id,
                mse: m.mse,
                cells: m.cells.len(),
                pixels,
                shape: RecordShape::Cylinder {
                    a: m.a,
                    b: m.b,
                    radius: m.radius,
                    uncertainty: m.uncertainty,
                },
            },
        }
    }

    pub fn is_plane(&self) -> bool {
        matches!(self.shape, RecordShape::Plane { .. })
    }

    pub fn radius(&self) -> Option<f64> {
        match self.shape {
            RecordShape::Cylinder { radius, .. } => Some(radius),
            RecordShape::Plane { .. } => None,
        }
    }

    pub fn to_line(&self) -> String {
        let mut s = String::new();
        match &self.shape {
            RecordShape::Plane { normal, d, cov } => {
                let _ = write!(
                    s,
                    "plane id={} n={} d={} mse={} cells={} pixels={} cov={}",
                    self.id,
                    vec3(normal),
                    fmt_f64(*d),
                    fmt_f64(self.mse),
                    self.cells,
                    self.pixels,
                    tuple(cov.transpose().iter().copied())
                );
            }
            RecordShape::Cylinder {
                a,
                b,
                radius,
                uncertainty,
            } => {
                let _ = write!(
                    s,
                    "cylinder id={} a={} b={} r={} mse={} cells={} pixels={}",
                    self.id,
                    vec3(a),
                    vec3(b),
                    fmt_f64(*radius),
                    fmt_f64(self.mse),
                    self.cells,
                    self.pixels
                );
                if let Some(u) = uncertainty {
                    let _ = write!(
                        s,
                        " var_r={} gauge={} cov={}",
                        fmt_f64(u.var_r),
                        u.fixed,
                        tuple(u.sigma_xi.transpose().iter().copied())
                    );
                }
            }
        }
        s
    }

    fn from_record(rec: &Record) -> Result<Self> {
        let id = count(rec, "id")?;
        if id == 0 {
            return Err(Error::parse(rec.line, "id must be positive"));
        }
        let mse = rec.number(&["mse"])?;
        let cells = count(rec, "cells")?;
        let pixels = count(rec, "pixels")?;
        let shape = match rec.kind.as_str() {
            "plane" => RecordShape::Plane {
                normal: rec.vector3(&["n", "normal"])?,
                d: rec.number(&["d"])?,
                cov: Matrix4::from_row_slice(&rec.tuple(&["cov"], 16)?),
            },
            "cylinder" => {
                let uncertainty = match rec.opt_number(&["var_r"])? {
                    Some(var_r) => {
                        let fixed = count(rec, "gauge")?;
                        if fixed > 2 {
                            return Err(Error::parse(rec.line, "gauge must be 0, 1 or 2"));
                        }
                        Some(CylinderUncertainty {
                            sigma_xi: Matrix5::from_row_slice(&rec.tuple(&["cov"], 25)?),
                            var_r,
                            fixed,
                        })
                    }
                    None if rec.has(&["cov", "gauge"]) => {
                        return Err(Error::parse(rec.line, "cylinder uncertainty needs var_r, gauge and cov together"));
                    }
                    None => None,
                };
                RecordShape::Cylinder {
                    a: rec.vector3(&["a"])?,
                    b: rec.vector3(&["b"])?,
                    radius: rec.number(&["r", "radius"])?,
                    uncertainty,
                }
            }
            other => return Err(Error::parse(rec.line, format!("unknown record kind {other:?}"))),
        };
        Ok(Self {
            id: id as u32,
            mse,
            cells,
            pixels,
            shape,
        })
    }
}

pub fn format_records(records: &[PrimitiveRecord]) -> String {
    records.iter().map(|r| r.to_line() + "\n").collect()
}

pub fn parse_primitive_records(text: &str) -> Result<Vec<PrimitiveRecord>> {
    parse_lines(text)?.iter().map(PrimitiveRecord::from_record).collect()
}

pub fn load_records(path: impl AsRef<Path>) -> Result<Vec<PrimitiveRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_primitive_records(&text)
}

/// Odometry frame from records and their label image. Cylinders without
/// uncertainty are skipped.
pub fn frame_from_records(records: &[PrimitiveRecord], labels: SegmentLabelImage) -> Frame {
    let mut planes = Vec::new();
    let mut cylinders = Vec::new();
    for r in records {
        match &r.shape {
            RecordShape::Plane { normal, d, cov } => planes.push(PlaneFeature {
                label: r.id,
                normal: *normal,
                d: *d,
                cov: *cov,
            }),
            RecordShape::Cylinder {
                a,
                b,
                radius,
                uncertainty: Some(u),
            } => cylinders.push(CylinderFeature {
                label: r.id,
                a: *a,
                b: *b,
                radius: *radius,
                var_r: u.var_r,
                endpoint_cov: u.endpoint_covariance(),
            }),
            RecordShape::Cylinder { uncertainty: None, .. } => {}
        }
    }
    Frame {
        planes,
        cylinders,
        labels,
    }
}

/// `tx ty tz qx qy qz qw`.
pub fn format_pose(pose: &Pose) -> String {
    let t = pose.translation;
    let q = pose.quaternion();
    [t.x, t.y, t.z, q[0], q[1], q[2], q[3]].map(fmt_f64).join(" ")
}

pub fn parse_pose(line: &str) -> Result<Pose> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|s| s.parse::<f64>().map_err(|_| Error::InvalidInput(format!("bad pose value {s:?}"))))
        .collect::<Result<_>>()?;
    if vals.len() != 7 {
        return Err(Error::InvalidInput(format!("pose line needs 7 values, got {}", vals.len())));
    }
    Pose::from_quaternion([vals[3], vals[4], vals[5], vals[6]], Vector3::new(vals[0], vals[1], vals[2]))
}
