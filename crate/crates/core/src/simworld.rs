//! Deterministic synthetic stereo worlds with ground truth.
//!
//! All randomness comes from `WorldConfig::seed`: the world is drawn from
//! stream 0 of a ChaCha8 generator and frame `k` is rendered from stream
//! `k + 1`, so frames can be rendered in any order or in parallel.

use crate::factors::{line_through_pixels, LineLandmark, LineObservation, PointObservation};
use crate::feature_grid::ScoredKeypoint;
use crate::geometry::{look_at, Pose, StereoCamera};
use crate::line_merge::Segment2D;
use crate::optimizer::FactorGraph;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Minimum distance between any landmark and any camera position.
pub const CAMERA_CLEARANCE: f64 = 0.5;
const NEAR_PLANE: f64 = 0.1;
const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("invalid world configuration: {0}")]
    InvalidConfig(String),
    #[error("could not place landmark {index} with {CAMERA_CLEARANCE} m clearance")]
    Placement { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TrajectoryKind {
    /// Camera on a horizontal circle looking at its center.
    Circle { radius: f64 },
    /// Straight line along world +z, looking forward.
    Straightaway,
    /// Lemniscate of Gerono in the x–z plane, looking at a fixed point ahead.
    FigureEight { radius: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extent {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Extent {
    pub fn new(min: Vector3<f64>, max: Vector3<f64>) -> Self {
        Self { min, max }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vector3<f64> {
        Vector3::from_fn(|i, _| {
            if self.max[i] > self.min[i] {
                rng.random_range(self.min[i]..self.max[i])
            } else {
                self.min[i]
            }
        })
    }

    fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    pub n_points: usize,
    pub n_lines: usize,
    /// Landmark bounding box; `None` picks one suited to the trajectory.
    pub extent: Option<Extent>,
    /// Extra point landmarks drawn from `far_extent`, appended after the
    /// `n_points` regular ones.
    pub far_points: usize,
    /// Box for the far points; `None` picks one beyond the end of the
    /// straightaway. Required for other trajectories when `far_points > 0`.
    pub far_extent: Option<Extent>,
    pub trajectory: TrajectoryKind,
    pub speed: f64,
    pub duration: f64,
    pub frame_rate: f64,
    pub pixel_noise_sigma: f64,
    pub dropout_prob: f64,
    /// Upper bound on the number of pieces a detected line is split into.
    pub max_line_pieces: usize,
    pub max_depth: f64,
    pub line_length: (f64, f64),
    pub camera: StereoCamera,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_points: 200,
            n_lines: 50,
            extent: None,
            far_points: 0,
            far_extent: None,
            trajectory: TrajectoryKind::Circle { radius: 6.0 },
            speed: 1.0,
            duration: 10.0,
            frame_rate: 10.0,
            pixel_noise_sigma: 0.5,
            dropout_prob: 0.0,
            max_line_pieces: 3,
            max_depth: 80.0,
            line_length: (0.8, 2.5),
            camera: StereoCamera::vga(),
        }
    }
}

impl WorldConfig {
    /// 20 m/s straight drive with a roadside corridor of near structure and
    /// a large population of distant points ahead.
    pub fn highway(seed: u64) -> Self {
        Self {
            seed,
            n_points: 80,
            far_points: 400,
            extent: Some(Extent::new(Vector3::new(-20.0, -3.0, 5.0), Vector3::new(20.0, 2.0, 250.0))),
            trajectory: TrajectoryKind::Straightaway,
            speed: 20.0,
            max_depth: 500.0,
            camera: StereoCamera::kitti_like(),
            ..Self::default()
        }
    }

    pub fn frame_count(&self) -> usize {
        ((self.duration * self.frame_rate) + 1e-9).floor() as usize
    }

    /// Standard deviation attached to every observation; the pixel noise, or
    /// one pixel for noiseless worlds.
    pub fn observation_sigma(&self) -> f64 {
        if self.pixel_noise_sigma > 0.0 {
            self.pixel_noise_sigma
        } else {
            1.0
        }
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: &str| Err(WorldError::InvalidConfig(m.to_string()));
        if !(self.frame_rate > 0.0) {
            return bad("frame_rate must be positive");
        }
        if !(self.duration > 0.0) || self.frame_count() < 2 {
            return bad("duration must cover at least two frames");
        }
        if !(self.speed >= 0.0) {
            return bad("speed must be non-negative");
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return bad("dropout_prob must lie in [0, 1)");
        }
        if !(self.pixel_noise_sigma >= 0.0) {
            return bad("pixel_noise_sigma must be non-negative");
        }
        if !(1..=3).contains(&self.max_line_pieces) {
            return bad("max_line_pieces must be 1, 2 or 3");
        }
        if !(self.line_length.0 > 0.0 && self.line_length.1 >= self.line_length.0) {
            return bad("line_length must be a positive, ordered range");
        }
        if !(self.max_depth > NEAR_PLANE) {
            return bad("max_depth must exceed the near plane");
        }
        if !self.camera.is_valid() {
            return bad("camera intrinsics must be positive");
        }
        if self.far_points > 0 && self.resolved_far_extent().is_none() {
            return bad("far_points needs a far_extent for this trajectory");
        }
        match self.trajectory {
            TrajectoryKind::Circle { radius } | TrajectoryKind::FigureEight { radius } if !(radius > 0.0) => {
                bad("trajectory radius must be positive")
            }
            _ => Ok(()),
        }
    }

    pub fn resolved_extent(&self) -> Extent {
        if let Some(e) = self.extent {
            return e;
        }
        match self.trajectory {
            TrajectoryKind::Circle { radius } => {
                let h = 0.6 * radius;
                Extent::new(Vector3::new(-h, -0.4 * radius, -h), Vector3::new(h, 0.4 * radius, h))
            }
            TrajectoryKind::Straightaway => {
                let len = self.speed * self.duration;
                Extent::new(Vector3::new(-15.0, -4.0, 2.0), Vector3::new(15.0, 4.0, len + 60.0))
            }
            TrajectoryKind::FigureEight { radius } => Extent::new(
                Vector3::new(-2.0 * radius, -radius, 1.5 * radius),
                Vector3::new(2.0 * radius, radius, 4.0 * radius),
            ),
        }
    }
}

impl WorldConfig {
    pub fn resolved_far_extent(&self) -> Option<Extent> {
        match (self.far_extent, self.trajectory) {
            (Some(e), _) => Some(e),
            (None, TrajectoryKind::Straightaway) => {
                let len = self.speed * self.duration;
                Some(Extent::new(
                    Vector3::new(-120.0, -40.0, len + 50.0),
                    Vector3::new(120.0, 5.0, len + 250.0),
                ))
            }
            (None, _) => None,
        }
    }
}

/// Camera-from-world pose at time `t`.
pub fn trajectory_pose(kind: &TrajectoryKind, speed: f64, t: f64) -> Pose {
    let down = Vector3::y();
    match *kind {
        TrajectoryKind::Circle { radius } => {
            let a = speed * t / radius;
            let c = Vector3::new(radius * a.cos(), 0.0, radius * a.sin());
            look_at(&c, &Vector3::zeros(), &down)
        }
        TrajectoryKind::Straightaway => {
            let c = Vector3::new(0.0, 0.0, speed * t);
            look_at(&c, &(c + Vector3::z()), &down)
        }
        TrajectoryKind::FigureEight { radius } => {
            let s = speed * t / radius;
            let c = Vector3::new(radius * s.sin(), 0.0, radius * s.sin() * s.cos());
            look_at(&c, &Vector3::new(0.0, 0.0, 3.0 * radius), &down)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub points: Vec<Vector3<f64>>,
    /// Detector response of each point landmark, constant across frames.
    pub point_response: Vec<f64>,
    pub lines: Vec<LineLandmark>,
    /// `(timestamp, camera-from-world)` for every frame.
    pub trajectory: Vec<(f64, Pose)>,
}

fn segment_point_distance(a: &Vector3<f64>, b: &Vector3<f64>, p: &Vector3<f64>) -> f64 {
    let d = b - a;
    let t = ((p - a).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
    (a + d * t - p).norm()
}

pub fn generate_world(cfg: &WorldConfig) -> Result<World, WorldError> {
    cfg.validate()?;
    let trajectory: Vec<(f64, Pose)> = (0..cfg.frame_count())
        .map(|k| {
            let t = k as f64 / cfg.frame_rate;
            (t, trajectory_pose(&cfg.trajectory, cfg.speed, t))
        })
        .collect();
    let centers: Vec<Vector3<f64>> = trajectory.iter().map(|(_, p)| p.center()).collect();
    let clear = |q: &Vector3<f64>| centers.iter().all(|c| (q - c).norm() >= CAMERA_CLEARANCE);
    let extent = cfg.resolved_extent();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let far_extent = cfg.resolved_far_extent();
    let total_points = cfg.n_points + cfg.far_points;
    let mut points = Vec::with_capacity(total_points);
    let mut point_response = Vec::with_capacity(total_points);
    for index in 0..total_points {
        let region = if index < cfg.n_points {
            extent
        } else {
            far_extent.expect("validated")
        };
        let p = (0..MAX_PLACEMENT_ATTEMPTS)
            .map(|_| region.sample(&mut rng))
            .find(|p| clear(p))
            .ok_or(WorldError::Placement { index })?;
        points.push(p);
        point_response.push(rng.random_range(10.0..100.0));
    }

    let mut lines = Vec::with_capacity(cfg.n_lines);
    for index in 0..cfg.n_lines {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let a = extent.sample(&mut rng);
            let dir = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let len = rng.random_range(cfg.line_length.0..=cfg.line_length.1);
            if dir.norm() < 0.1 {
                continue;
            }
            let b = a + dir.normalize() * len;
            if extent.contains(&b) && centers.iter().all(|c| segment_point_distance(&a, &b, c) >= CAMERA_CLEARANCE) {
                placed = Some(LineLandmark::new(a, b));
                break;
            }
        }
        lines.push(placed.ok_or(WorldError::Placement {
            index: total_points + index,
        })?);
    }

    Ok(World {
        config: *cfg,
        points,
        point_response,
        lines,
        trajectory,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineDetection {
    pub landmark: usize,
    pub obs: LineObservation,
    /// Detected pieces in center-origin image coordinates, ordered from the
    /// start endpoint to the end endpoint.
    pub pieces: Vec<Segment2D>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrame {
    pub index: usize,
    pub timestamp: f64,
    pub truth_pose: Pose,
    pub point_obs: Vec<(usize, PointObservation)>,
    pub line_obs: Vec<LineDetection>,
}

impl SyntheticFrame {
    /// Keypoints for suppression, in the order of `point_obs`.
    pub fn keypoints(&self, world: &World) -> Vec<ScoredKeypoint> {
        self.point_obs
            .iter()
            .map(|(id, o)| ScoredKeypoint::new(o.ul, o.vl, world.point_response[*id], 0))
            .collect()
    }

    /// Every detected piece with the index of the detection it came from.
    pub fn segments(&self) -> (Vec<Segment2D>, Vec<usize>) {
        let mut segs = Vec::new();
        let mut owner = Vec::new();
        for (i, d) in self.line_obs.iter().enumerate() {
            segs.extend_from_slice(&d.pieces);
            owner.extend(std::iter::repeat_n(i, d.pieces.len()));
        }
        (segs, owner)
    }
}

fn visible_projection(cam: &StereoCamera, pc: &Vector3<f64>, max_depth: f64) -> Option<(f64, f64, f64)> {
    if !(pc.z > NEAR_PLANE && pc.z <= max_depth) {
        return None;
    }
    let p = cam.project_stereo(pc).ok()?;
    (cam.in_image(p.ul, p.vl) && cam.in_image(p.ur, p.vl)).then_some((p.ul, p.vl, p.ur))
}

/// Splits `[0, 1]` into `k` sub-intervals separated by gaps.
fn piece_intervals(rng: &mut ChaCha8Rng, k: usize) -> Vec<(f64, f64)> {
    let mut cuts: Vec<f64> = (1..k).map(|_| rng.random_range(0.2..0.8)).collect();
    cuts.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(k);
    let mut start = 0.0;
    for c in cuts {
        let gap = rng.random_range(0.02..0.06);
        let end = (c - gap / 2.0).max(start + 0.05);
        out.push((start, end));
        start = (c + gap / 2.0).max(end + 0.01);
    }
    out.push((start, 1.0));
    out
}

/// Renders frame `index` of the world's trajectory.
pub fn render_frame(world: &World, index: usize) -> SyntheticFrame {
    let (timestamp, pose) = world.trajectory[index];
    render_frame_at(world, &pose, index, timestamp)
}

/// Renders the world from an arbitrary pose using the RNG stream of `index`.
pub fn render_frame_at(world: &World, pose: &Pose, index: usize, timestamp: f64) -> SyntheticFrame {
    let cfg = &world.config;
    let cam = &cfg.camera;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);
    let noise = Normal::new(0.0, cfg.pixel_noise_sigma.max(0.0)).expect("finite sigma");
    let draw = |rng: &mut ChaCha8Rng| {
        if cfg.pixel_noise_sigma > 0.0 {
            noise.sample(rng)
        } else {
            0.0
        }
    };
    let sigma = cfg.observation_sigma();

    let mut point_obs = Vec::new();
    for (id, p) in world.points.iter().enumerate() {
        // draws happen for every landmark so visibility does not shift the stream
        let drop = rng.random::<f64>() < cfg.dropout_prob;
        let (nu, nv, nr) = (draw(&mut rng), draw(&mut rng), draw(&mut rng));
        let Some((ul, vl, ur)) = visible_projection(cam, &pose.transform_point(p), cfg.max_depth) else {
            continue;
        };
        let (ul, vl, ur) = (ul + nu, vl + nv, ur + nr);
        if drop || !cam.in_image(ul, vl) || !cam.in_image(ur, vl) {
            continue;
        }
        point_obs.push((id, PointObservation { ul, vl, ur, sigma }));
    }

    let (w, h) = (cam.width as f64, cam.height as f64);
    let mut line_obs = Vec::new();
    for (id, l) in world.lines.iter().enumerate() {
        let drop = rng.random::<f64>() < cfg.dropout_prob;
        let n: [f64; 6] = std::array::from_fn(|_| draw(&mut rng));
        let pieces_k = rng.random_range(1..=cfg.max_line_pieces);
        let intervals = piece_intervals(&mut rng, pieces_k);
        let (Some(a), Some(b)) = (
            visible_projection(cam, &pose.transform_point(&l.start), cfg.max_depth),
            visible_projection(cam, &pose.transform_point(&l.end), cfg.max_depth),
        ) else {
            continue;
        };
        if drop {
            continue;
        }
        let (u1, v1, r1) = (a.0 + n[0], a.1 + n[1], a.2 + n[2]);
        let (u2, v2, r2) = (b.0 + n[3], b.1 + n[4], b.2 + n[5]);
        if !cam.in_image(u1, v1) || !cam.in_image(u2, v2) || (u2 - u1).hypot(v2 - v1) < 10.0 {
            continue;
        }
        let Ok(coeffs) = line_through_pixels(u1, v1, u2, v2) else {
            continue;
        };
        let pieces = intervals
            .iter()
            .map(|&(s, e)| {
                Segment2D::new(u1 + s * (u2 - u1), v1 + s * (v2 - v1), u1 + e * (u2 - u1), v1 + e * (v2 - v1))
                    .from_corner_origin(w, h)
            })
            .collect();
        line_obs.push(LineDetection {
            landmark: id,
            obs: LineObservation {
                line: coeffs,
                u_start_right: r1,
                u_end_right: r2,
                sigma,
            },
            pieces,
        });
    }

    SyntheticFrame {
        index,
        timestamp,
        truth_pose: *pose,
        point_obs,
        line_obs,
    }
}

/// Renders every frame of the trajectory.
pub fn render_all(world: &World) -> Vec<SyntheticFrame> {
    use rayon::prelude::*;
    (0..world.trajectory.len())
        .into_par_iter()
        .map(|k| render_frame(world, k))
        .collect()
}

/// Factor graph of all observations with variables at ground truth; the first
/// pose is fixed.
pub fn observation_graph(world: &World, frames: &[SyntheticFrame]) -> FactorGraph {
    let mut g = FactorGraph::new(world.config.camera);
    for &p in &world.points {
        g.add_point(p);
    }
    for &l in &world.lines {
        g.add_line(l);
    }
    for (k, f) in frames.iter().enumerate() {
        let pi = g.add_pose(f.truth_pose, k == 0);
        for (id, o) in &f.point_obs {
            g.add_point_factor(pi, *id, *o);
        }
        for d in &f.line_obs {
            g.add_line_factor(pi, d.landmark, d.obs);
        }
    }
    g
}
