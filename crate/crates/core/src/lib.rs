//! Metric vehicle trajectory reconstruction from aerial keypoint detections.
//!
//! The crate is organised around the processing chain of a drone survey:
//!
//! ```text
//! reference tracks ──► camera (PnP recalibration, ground back-projection)
//!                         │
//! detections ──► tracking (IoU association, map gating)
//!                         │
//!                model_fitting (shape prior + LM) ──► state_estimation (bicycle EKF)
//!                                                         │
//!                                      trajectories ──► analytics / evaluation
//! ```
//!
//! [`synth`] generates complete synthetic scenes with ground truth, and
//! [`pipeline`] wires everything into the batch entry points used by the CLI.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod angle;
pub mod camera;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod keypoints;
pub mod lm;
pub mod model_fitting;
pub mod pipeline;
pub mod semantic_map;
pub mod shape_prior;
pub mod state_estimation;
pub mod synth;
pub mod tracking;

pub use camera::{CameraIntrinsics, CameraModel, CameraPose, GroundCorrespondence};
pub use error::{Error, ErrorKind, Result};
pub use keypoints::{FrameDetections, KeypointDetection, NUM_KEYPOINTS};
pub use model_fitting::{FitConfig, GroundPose, VehicleFit};
pub use semantic_map::{MapSegment, SegmentType, SemanticMap};
pub use shape_prior::{ShapeParams, ShapePrior, ShapeVector};
pub use state_estimation::{EkfState, ShapeEstimate};
pub use tracking::{Track, TrackState, Tracker};
