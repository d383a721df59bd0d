//! Multi-object tracking of ground vehicles from a drone camera.
//!
//! The camera is modelled as a direction-of-arrival (DOA) sensor whose
//! detections follow a von Mises–Fisher distribution around the direction to
//! each vehicle. Sets of vehicle trajectories on the ground plane are
//! estimated with a (trajectory) Poisson multi-Bernoulli mixture filter that
//! uses iterated posterior linearisation for the single-object updates.
//!
//! Module map:
//!
//! * [`geometry`]: frames, quaternions, pixel/DOA conversion, ground projection.
//! * [`directional`]: the von Mises–Fisher distribution and the FoV clutter model.
//! * [`assignment`]: optimal and k-best 2D assignment.
//! * [`models`]: dynamic, birth and measurement models.
//! * [`slr`]: sigma points, statistical linear regression, IPLF and
//!   trajectory Gaussians with L-scan truncation.
//! * [`tpmbm`]: the PMBM / TPMBM filtering recursion.
//! * [`calibration`]: measurement-model parameter estimation.
//! * [`metrics`]: GOSPA and RMS-GOSPA.
//! * [`sim`]: synthetic scenario generator.
//! * [`io`]: file formats and run configuration used by the command-line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assignment;
pub mod calibration;
pub mod directional;
mod error;
pub mod geometry;
pub mod io;
mod linalg;
pub mod metrics;
pub mod models;
pub mod sim;
pub mod slr;
pub mod tpmbm;

pub use error::{Error, Result};
