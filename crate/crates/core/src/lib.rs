//! Stereo point-line SLAM back-end.
//!
//! The crate covers the pieces between feature detection and a trajectory
//! estimate: grid-based keypoint suppression ([`feature_grid`]), Hough-space
//! merging of split line segments ([`line_merge`]), stereo point and line
//! reprojection factors ([`factors`]), robust Levenberg-Marquardt bundle
//! adjustment ([`optimizer`]), keyframe insertion ([`keyframe`]), a
//! deterministic synthetic world ([`simworld`]), trajectory metrics
//! ([`eval`]) and an end-to-end tracking and mapping loop ([`pipeline`]).

pub mod cli;
pub mod discrepancy;
pub mod eval;
pub mod factors;
pub mod feature_grid;
pub mod geometry;
pub mod keyframe;
pub mod line_merge;
pub mod optimizer;
pub mod pipeline;
pub mod simworld;
pub mod textio;
