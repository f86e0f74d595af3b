//! Plane and cylinder primitive extraction from organized depth maps, with
//! probabilistic cylinder refinement and primitive-based frame-to-frame pose
//! estimation.

// `!(x > y)` rejects NaN along with the failing comparison.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cell_grid;
pub mod cloud;
pub mod error;
pub mod fitting;
pub mod histogram;
pub mod io;
pub mod linalg;
pub mod odometry;
pub mod pipeline;
pub mod prob_cylinder;
pub mod records;
pub mod refinement;
pub mod region_growing;
pub mod scene;
mod text;

pub use cloud::{backproject, backproject_units, DepthImage, DepthNoiseModel, Intrinsics, OrganizedCloud};
pub use error::{Error, Result};
pub use fitting::{CylinderModel, PlaneModel, Primitive};
pub use odometry::{Frame, Pose};
pub use pipeline::{extract, ExtractConfig, Extraction, StageTimings};
pub use records::PrimitiveRecord;
pub use refinement::SegmentLabelImage;
