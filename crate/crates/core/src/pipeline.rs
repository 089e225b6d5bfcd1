//! End-to-end stereo point-line tracking and mapping over a synthetic world.
//!
//! Per frame: keypoint suppression and line merging on the synthetic
//! detections, constant-velocity prediction, pose-only tracking against the
//! map, then the keyframe policy. New keyframes triangulate unseen landmarks
//! from stereo and trigger a local bundle adjustment over the most recent
//! keyframes. A global adjustment runs at the end, and every frame's pose is
//! re-expressed relative to its (optimized) reference keyframe.
//!
//! Data association uses the simulator's landmark ids.

use crate::eval::{self, Trajectory};
use crate::factors::{line_through_pixels, LineLandmark, LineObservation, PointObservation};
use crate::feature_grid::{compute_grid_spec, suppress_indices, GridError, DEFAULT_CELL_QUOTA};
use crate::geometry::{Pose, StereoCamera};
use crate::keyframe::{DecisionRecord, KeyframeError, KeyframePolicy, PolicyParams};
use crate::line_merge::{merge_segments_detailed, MergeTolerances};
use crate::optimizer::{
    optimize, FactorGraph, LmSettings, OptimizeError, OptimizeMode, CHI2_2DOF_95, CHI2_3DOF_95,
};
use crate::simworld::{render_all, SyntheticFrame, World};
use nalgebra::Vector3;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error(transparent)]
    Keyframe(#[from] KeyframeError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error("first frame has no usable stereo observations")]
    EmptyFirstFrame,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    /// Keypoint target per frame for suppression.
    pub grid_target: usize,
    pub merge: MergeTolerances,
    pub use_lines: bool,
    pub tracking: LmSettings,
    pub mapping: LmSettings,
    pub policy: PolicyParams,
    /// Number of most recent keyframes left free in local adjustment.
    pub local_window: usize,
    pub global_ba: bool,
    /// Smallest stereo disparity (px) accepted for triangulation.
    pub min_disparity: f64,
    pub huber_point: f64,
    pub huber_line: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            grid_target: 300,
            merge: MergeTolerances::default(),
            use_lines: true,
            tracking: LmSettings {
                max_iterations: 20,
                ..LmSettings::default()
            },
            mapping: LmSettings {
                max_iterations: 15,
                ..LmSettings::default()
            },
            policy: PolicyParams::default(),
            local_window: 5,
            global_ba: true,
            min_disparity: 1.0,
            huber_point: CHI2_3DOF_95.sqrt(),
            huber_line: CHI2_2DOF_95.sqrt(),
        }
    }
}

/// Observations of one frame that survived the front-end.
#[derive(Debug, Clone, Default)]
struct FrontEnd {
    points: Vec<(usize, PointObservation)>,
    /// Line observations with the left-image endpoints (start, end) of the
    /// merged detection, corner-origin pixels.
    lines: Vec<(usize, LineObservation, [(f64, f64); 2])>,
}

#[derive(Debug, Clone)]
struct Keyframe {
    frame: usize,
    pose: Pose,
    points: Vec<(usize, PointObservation)>,
    lines: Vec<(usize, LineObservation)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineResult {
    /// Estimated world-from-camera trajectory.
    pub estimate: Trajectory,
    pub truth: Trajectory,
    /// Frame index of every keyframe.
    pub keyframes: Vec<usize>,
    pub decisions: Vec<DecisionRecord>,
    /// Unaligned position RMSE (m). The first keyframe is anchored at
    /// ground truth, so no alignment is needed.
    pub ate: f64,
    pub map_points: usize,
    pub map_lines: usize,
    /// Mean number of inlier factors per tracked frame.
    pub mean_inliers: f64,
}

impl PipelineResult {
    pub fn keyframe_rate(&self) -> f64 {
        self.keyframes.len() as f64 / self.truth.len() as f64
    }
}

fn front_end(frame: &SyntheticFrame, world: &World, cfg: &PipelineConfig) -> Result<FrontEnd, GridError> {
    let cam = &world.config.camera;
    let spec = compute_grid_spec(cam.width, cam.height, cfg.grid_target)?;
    let kps = frame.keypoints(world);
    let mut keep = suppress_indices(&kps, &spec, DEFAULT_CELL_QUOTA);
    keep.sort_unstable();
    let points = keep.into_iter().map(|i| frame.point_obs[i]).collect();

    let mut lines = Vec::new();
    if cfg.use_lines {
        let (segs, owner) = frame.segments();
        let (w, h) = (cam.width as f64, cam.height as f64);
        for m in merge_segments_detailed(&segs, &cfg.merge) {
            let det = owner[m.members[0]];
            if m.members.iter().any(|&i| owner[i] != det) {
                // pieces of different landmarks fused: ambiguous, drop
                continue;
            }
            let s = m.segment.to_corner_origin(w, h);
            let Ok(coeffs) = line_through_pixels(s.x1, s.y1, s.x2, s.y2) else {
                continue;
            };
            let d = &frame.line_obs[det];
            let obs = LineObservation { line: coeffs, ..d.obs };
            lines.push((d.landmark, obs, [(s.x1, s.y1), (s.x2, s.y2)]));
        }
        lines.sort_by_key(|l| l.0);
    }
    Ok(FrontEnd { points, lines })
}

fn back_project(cam: &StereoCamera, pose: &Pose, u: f64, v: f64, ur: f64, min_disp: f64) -> Option<Vector3<f64>> {
    let disp = u - ur;
    if !(disp >= min_disp) {
        return None;
    }
    let z = cam.bf / disp;
    let pc = Vector3::new((u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z);
    Some(pose.inverse().transform_point(&pc))
}

/// Map state. Landmarks are keyed by simulator id.
struct Mapper<'a> {
    cfg: &'a PipelineConfig,
    cam: StereoCamera,
    points: BTreeMap<usize, Vector3<f64>>,
    lines: BTreeMap<usize, LineLandmark>,
    keyframes: Vec<Keyframe>,
}

impl<'a> Mapper<'a> {
    fn new_graph(&self) -> FactorGraph {
        let mut g = FactorGraph::new(self.cam);
        g.huber_point = self.cfg.huber_point;
        g.huber_line = self.cfg.huber_line;
        g
    }

    /// Adds unseen landmarks observed by `fe` from pose `pose`.
    fn triangulate(&mut self, pose: &Pose, fe: &FrontEnd) {
        let md = self.cfg.min_disparity;
        for (id, o) in &fe.points {
            if !self.points.contains_key(id) {
                if let Some(p) = back_project(&self.cam, pose, o.ul, o.vl, o.ur, md) {
                    self.points.insert(*id, p);
                }
            }
        }
        for (id, o, ends) in &fe.lines {
            if self.lines.contains_key(id) {
                continue;
            }
            let a = back_project(&self.cam, pose, ends[0].0, ends[0].1, o.u_start_right, md);
            let b = back_project(&self.cam, pose, ends[1].0, ends[1].1, o.u_end_right, md);
            if let (Some(a), Some(b)) = (a, b) {
                if (a - b).norm() > 1e-3 {
                    self.lines.insert(*id, LineLandmark::new(a, b));
                }
            }
        }
    }

    fn observed_in_map(&self, fe: &FrontEnd) -> usize {
        fe.points.iter().filter(|(id, _)| self.points.contains_key(id)).count()
            + fe.lines.iter().filter(|(id, ..)| self.lines.contains_key(id)).count()
    }

    /// Pose-only tracking with one round of outlier removal. Returns the pose
    /// and the inlier count.
    fn track(&self, predicted: &Pose, fe: &FrontEnd) -> Result<(Pose, usize), OptimizeError> {
        let build = |pose: Pose, skip_p: &[usize], skip_l: &[usize]| {
            let mut g = self.new_graph();
            g.add_pose(pose, false);
            for (k, (id, o)) in fe.points.iter().enumerate() {
                if let Some(p) = self.points.get(id) {
                    if !skip_p.contains(&k) {
                        let li = g.add_point(*p);
                        g.add_point_factor(0, li, *o);
                    }
                }
            }
            for (k, (id, o, _)) in fe.lines.iter().enumerate() {
                if let Some(l) = self.lines.get(id) {
                    if !skip_l.contains(&k) {
                        let li = g.add_line(*l);
                        g.add_line_factor(0, li, *o);
                    }
                }
            }
            g
        };
        let mut g = build(*predicted, &[], &[]);
        if g.point_factors.len() + g.line_factors.len() < 3 {
            return Ok((*predicted, 0));
        }
        let rep = optimize(&mut g, &self.cfg.tracking, &OptimizeMode::PoseOnly)?;
        if rep.point_outliers.is_empty() && rep.line_outliers.is_empty() {
            return Ok((g.poses[0].pose, g.point_factors.len() + g.line_factors.len()));
        }
        // map factor indices back to front-end indices
        let p_idx: Vec<usize> = (0..fe.points.len()).filter(|&k| self.points.contains_key(&fe.points[k].0)).collect();
        let l_idx: Vec<usize> = (0..fe.lines.len()).filter(|&k| self.lines.contains_key(&fe.lines[k].0)).collect();
        let skip_p: Vec<usize> = rep.point_outliers.iter().map(|&i| p_idx[i]).collect();
        let skip_l: Vec<usize> = rep.line_outliers.iter().map(|&i| l_idx[i]).collect();
        let mut g2 = build(g.poses[0].pose, &skip_p, &skip_l);
        if g2.point_factors.len() + g2.line_factors.len() < 3 {
            return Ok((g.poses[0].pose, 0));
        }
        let rep2 = optimize(&mut g2, &self.cfg.tracking, &OptimizeMode::PoseOnly)?;
        let inliers = g2.point_factors.len() + g2.line_factors.len() - rep2.point_outliers.len() - rep2.line_outliers.len();
        Ok((g2.poses[0].pose, inliers))
    }

    /// Bundle adjustment over `free` keyframes (indices into `keyframes`);
    /// other keyframes observing the same landmarks enter as fixed poses.
    fn adjust(&mut self, free: &[usize]) -> Result<(), OptimizeError> {
        let free_set: Vec<bool> = (0..self.keyframes.len()).map(|k| free.contains(&k)).collect();
        let mut pt_ids: Vec<usize> = Vec::new();
        let mut ln_ids: Vec<usize> = Vec::new();
        for &k in free {
            let kf = &self.keyframes[k];
            pt_ids.extend(kf.points.iter().map(|o| o.0).filter(|id| self.points.contains_key(id)));
            ln_ids.extend(kf.lines.iter().map(|o| o.0).filter(|id| self.lines.contains_key(id)));
        }
        pt_ids.sort_unstable();
        pt_ids.dedup();
        ln_ids.sort_unstable();
        ln_ids.dedup();
        let mut g = self.new_graph();
        let pt_slot: BTreeMap<usize, usize> = pt_ids.iter().map(|&id| (id, g.add_point(self.points[&id]))).collect();
        let ln_slot: BTreeMap<usize, usize> = ln_ids.iter().map(|&id| (id, g.add_line(self.lines[&id]))).collect();

        let mut pose_of_kf: BTreeMap<usize, usize> = BTreeMap::new();
        let mut window = Vec::new();
        let mut any_fixed = false;
        for (k, kf) in self.keyframes.iter().enumerate() {
            let sees = kf.points.iter().any(|o| pt_slot.contains_key(&o.0))
                || kf.lines.iter().any(|o| ln_slot.contains_key(&o.0));
            if !(free_set[k] || sees) {
                continue;
            }
            let fixed = !free_set[k] || k == 0;
            any_fixed |= fixed;
            let pi = g.add_pose(kf.pose, fixed);
            pose_of_kf.insert(k, pi);
            if free_set[k] {
                window.push(pi);
            }
            for (id, o) in &kf.points {
                if let Some(&s) = pt_slot.get(id) {
                    g.add_point_factor(pi, s, *o);
                }
            }
            for (id, o) in &kf.lines {
                if let Some(&s) = ln_slot.get(id) {
                    g.add_line_factor(pi, s, *o);
                }
            }
        }
        if !any_fixed {
            // nothing anchors the window: hold its oldest keyframe
            if let Some(&first) = window.first() {
                g.poses[first].fixed = true;
            }
        }
        optimize(&mut g, &self.cfg.mapping, &OptimizeMode::LocalBa { window })?;
        for (&k, &pi) in &pose_of_kf {
            self.keyframes[k].pose = g.poses[pi].pose;
        }
        for (&id, &s) in &pt_slot {
            self.points.insert(id, g.points[s]);
        }
        for (&id, &s) in &ln_slot {
            self.lines.insert(id, g.lines[s]);
        }
        Ok(())
    }

    fn add_keyframe(&mut self, frame: usize, pose: Pose, fe: &FrontEnd) -> usize {
        self.triangulate(&pose, fe);
        let kf = Keyframe {
            frame,
            pose,
            points: fe.points.clone(),
            lines: fe.lines.iter().map(|(id, o, _)| (*id, *o)).collect(),
        };
        self.keyframes.push(kf);
        self.observed_in_map(fe)
    }
}

/// Runs tracking and mapping over every frame of `world`.
pub fn run_pipeline(world: &World, cfg: &PipelineConfig) -> Result<PipelineResult, PipelineError> {
    let frames = render_all(world);
    let fronts: Vec<FrontEnd> = frames
        .iter()
        .map(|f| front_end(f, world, cfg))
        .collect::<Result<_, _>>()?;
    let mut mapper = Mapper {
        cfg,
        cam: world.config.camera,
        points: BTreeMap::new(),
        lines: BTreeMap::new(),
        keyframes: Vec::new(),
    };

    let first_pose = frames[0].truth_pose;
    let first_count = mapper.add_keyframe(0, first_pose, &fronts[0]);
    if first_count == 0 {
        return Err(PipelineError::EmptyFirstFrame);
    }
    let mut policy = KeyframePolicy::new(cfg.policy, first_count, first_pose.center(), frames[0].timestamp);

    // tracked pose and reference keyframe of every frame
    let mut tracked: Vec<Pose> = vec![first_pose];
    let mut reference: Vec<usize> = vec![0];
    let mut inlier_sum = 0usize;
    for k in 1..frames.len() {
        let prev = tracked[k - 1];
        let predicted = if k >= 2 {
            prev.compose(&tracked[k - 2].inverse()).compose(&prev)
        } else {
            prev
        };
        let (pose, inliers) = mapper.track(&predicted, &fronts[k])?;
        inlier_sum += inliers;
        tracked.push(pose);
        let rec = policy.step(inliers, pose.center(), frames[k].timestamp)?;
        if rec.decision.insert {
            let n = mapper.add_keyframe(k, pose, &fronts[k]);
            policy.set_reference_inliers(n);
            let last = mapper.keyframes.len() - 1;
            let free: Vec<usize> = (last + 1 - cfg.local_window.clamp(1, last + 1)..=last).collect();
            mapper.adjust(&free)?;
            // the new keyframe's optimized pose becomes the frame estimate
            tracked[k] = mapper.keyframes[last].pose;
        }
        reference.push(mapper.keyframes.len() - 1);
    }

    // tracked pose of each keyframe before the final adjustment
    let kf_tracked: Vec<Pose> = mapper.keyframes.iter().map(|kf| tracked[kf.frame]).collect();
    if cfg.global_ba && mapper.keyframes.len() > 1 {
        let all: Vec<usize> = (0..mapper.keyframes.len()).collect();
        mapper.adjust(&all)?;
    }

    let mut estimate = Vec::with_capacity(frames.len());
    for (k, f) in frames.iter().enumerate() {
        let r = reference[k];
        let rel = tracked[k].compose(&kf_tracked[r].inverse());
        let pose = rel.compose(&mapper.keyframes[r].pose);
        estimate.push((f.timestamp, pose.inverse()));
    }
    let estimate = Trajectory::new(estimate)?;
    let truth = Trajectory::new(world.trajectory.iter().map(|(t, p)| (*t, p.inverse())).collect())?;
    let ate = eval::ate_rmse(&estimate, &truth, false)?;
    Ok(PipelineResult {
        estimate,
        truth,
        keyframes: mapper.keyframes.iter().map(|kf| kf.frame).collect(),
        decisions: policy.log().to_vec(),
        ate,
        map_points: mapper.points.len(),
        map_lines: mapper.lines.len(),
        mean_inliers: inlier_sum as f64 / (frames.len() - 1) as f64,
    })
}
