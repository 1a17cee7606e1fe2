//! Building blocks for teacher/proxy/student unsupervised domain adaptation of
//! object detectors from daytime to nighttime imagery.
//!
//! - [`geometry`]: boxes, detections and IoU-based matching.
//! - [`glt`]: global-local night-prior image transformations.
//! - [`ptc`]: fusion of teacher and proxy-student detections into pseudo-labels.
//! - [`ait`]: adaptive classification threshold driven by matched confidences.
//! - [`schedule`]: EMA parameter blending and burn-in/burn-up phase gates.
//! - [`sim`]: synthetic scenes and detectors that close the adaptation loop.
//! - [`eval`]: AP / mAP@0.5 evaluation and pseudo-label quality.
//! - [`io`]: configuration, detection files, images and atomic output.
//! - [`sweep`]: threshold sensitivity sweeps over fixed detections.

pub mod ait;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod glt;
pub mod io;
pub mod ptc;
pub mod rng;
pub mod schedule;
pub mod sim;
pub mod sweep;

pub use error::{Error, Result};
