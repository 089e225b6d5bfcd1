//! Command-line front end: per-module tools and the synthetic end-to-end run.
//!
//! Every command validates all of its inputs before creating the output
//! directory, so a failed run leaves nothing behind.

use crate::discrepancy::{audit_grid, audit_jacobians, format_report};
use crate::eval::{self, format_kitti, format_tum, parse_trajectory, TrajectoryFormat};
use crate::feature_grid::{
    compute_grid_spec, format_keypoints, parse_keypoints, select_with_tolerance, suppress, suppress_pyramid,
};
use crate::geometry::StereoCamera;
use crate::keyframe::{format_decision_log, PidState, PolicyParams, VelocityKalman};
use crate::line_merge::{format_segments, merge_segments, parse_segments, MergeTolerances};
use crate::optimizer::{optimize, read_graph, write_graph, LinearSolver, LmSettings, OptimizeMode};
use crate::pipeline::{run_pipeline, PipelineConfig};
use crate::simworld::{generate_world, observation_graph, render_all, Extent, TrajectoryKind, WorldConfig};
use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, Parser)]
#[command(name = "plslam", version, about = "Stereo point-line SLAM back-end tools")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select well-distributed keypoints with grid suppression.
    Suppress(SuppressArgs),
    /// Merge collinear line segments in Hough space.
    MergeLines(MergeArgs),
    /// Optimize a factor graph file.
    Ba(BaArgs),
    /// Generate a synthetic world, run tracking and mapping, and evaluate.
    RunSim(RunSimArgs),
    /// Compare an estimated trajectory with ground truth.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct SuppressArgs {
    /// Keypoint file: `x y response octave` per line.
    pub input: PathBuf,
    #[arg(long)]
    pub width: u32,
    #[arg(long)]
    pub height: u32,
    /// Target keypoint count.
    #[arg(long)]
    pub target: usize,
    /// Adapt the cell quota until the count is within this relative tolerance.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Suppress each octave separately over this many pyramid levels.
    #[arg(long)]
    pub levels: Option<u32>,
    #[arg(long, default_value_t = 1.2)]
    pub scale_factor: f64,
    /// Timed repetitions for the timing statistics.
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// Segment file: `x1 y1 x2 y2` per line, image-center origin.
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub rho_fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    pub rho_floor: f64,
    /// Angular tolerance in degrees.
    #[arg(long, default_value_t = 1.0)]
    pub theta_deg: f64,
    /// Input and output use a top-left origin in a `WIDTHxHEIGHT` image,
    /// e.g. `640x480`.
    #[arg(long, value_parser = parse_image_size)]
    pub corner_origin: Option<(f64, f64)>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

fn parse_image_size(s: &str) -> Result<(f64, f64), String> {
    let (w, h) = s.split_once('x').ok_or_else(|| format!("expected WIDTHxHEIGHT, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<u32>().ok().filter(|&v| v > 0).map(f64::from);
    match (parse(w), parse(h)) {
        (Some(w), Some(h)) => Ok((w, h)),
        _ => Err(format!("expected WIDTHxHEIGHT with positive integers, got `{s}`")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaMode {
    PoseOnly,
    Local,
    Global,
}

#[derive(Debug, Args)]
pub struct BaArgs {
    /// Factor graph file.
    pub input: PathBuf,
    #[arg(long, value_enum, default_value_t = BaMode::Global)]
    pub mode: BaMode,
    /// Comma-separated free pose indices for `--mode local`.
    #[arg(long, value_delimiter = ',')]
    pub window: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    pub max_iterations: usize,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunSimArgs {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Also write per-frame keypoint and segment files plus the observation graph.
    #[arg(long)]
    pub dump_frames: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Estimated trajectory (TUM or KITTI).
    pub estimate: PathBuf,
    /// Ground-truth trajectory (TUM or KITTI).
    pub truth: PathBuf,
    /// Skip the rigid alignment before ATE.
    #[arg(long)]
    pub no_align: bool,
    /// Frame gap for RPE.
    #[arg(long, default_value_t = 1)]
    pub delta: usize,
    /// Association tolerance (s).
    #[arg(long, default_value_t = eval::DEFAULT_MAX_DT)]
    pub max_dt: f64,
    #[arg(long)]
    pub svg: bool,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryName {
    Circle,
    Straightaway,
    FigureEight,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldSection {
    pub trajectory: TrajectoryName,
    /// Circle / figure-eight radius (m).
    pub radius: f64,
    pub speed: f64,
    pub duration: f64,
    pub frame_rate: f64,
    pub n_points: usize,
    pub far_points: usize,
    pub n_lines: usize,
    pub pixel_noise_sigma: f64,
    pub dropout_prob: f64,
    pub max_line_pieces: usize,
    pub max_depth: f64,
    pub line_length: [f64; 2],
    pub extent_min: Option<[f64; 3]>,
    pub extent_max: Option<[f64; 3]>,
    pub far_extent_min: Option<[f64; 3]>,
    pub far_extent_max: Option<[f64; 3]>,
}

impl Default for WorldSection {
    fn default() -> Self {
        let w = WorldConfig::default();
        Self {
            trajectory: TrajectoryName::Circle,
            radius: 6.0,
            speed: w.speed,
            duration: w.duration,
            frame_rate: w.frame_rate,
            n_points: w.n_points,
            far_points: w.far_points,
            n_lines: w.n_lines,
            pixel_noise_sigma: w.pixel_noise_sigma,
            dropout_prob: w.dropout_prob,
            max_line_pieces: w.max_line_pieces,
            max_depth: w.max_depth,
            line_length: [w.line_length.0, w.line_length.1],
            extent_min: None,
            extent_max: None,
            far_extent_min: None,
            far_extent_max: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CameraPreset {
    Vga,
    Wide,
    KittiLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraSection {
    pub preset: CameraPreset,
    pub fx: Option<f64>,
    pub fy: Option<f64>,
    pub cx: Option<f64>,
    pub cy: Option<f64>,
    pub bf: Option<f64>,
}

impl Default for CameraSection {
    fn default() -> Self {
        Self {
            preset: CameraPreset::Vga,
            fx: None,
            fy: None,
            cx: None,
            cy: None,
            bf: None,
        }
    }
}

impl CameraSection {
    pub fn camera(&self) -> StereoCamera {
        let mut c = match self.preset {
            CameraPreset::Vga => StereoCamera::vga(),
            CameraPreset::Wide => StereoCamera::wide(),
            CameraPreset::KittiLike => StereoCamera::kitti_like(),
        };
        c.fx = self.fx.unwrap_or(c.fx);
        c.fy = self.fy.unwrap_or(c.fy);
        c.cx = self.cx.unwrap_or(c.cx);
        c.cy = self.cy.unwrap_or(c.cy);
        c.bf = self.bf.unwrap_or(c.bf);
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontEndSection {
    /// Keypoint target per frame.
    pub grid_target: usize,
    pub use_lines: bool,
    pub rho_fraction: f64,
    pub rho_floor: f64,
    pub theta_deg: f64,
}

impl Default for FrontEndSection {
    fn default() -> Self {
        let m = MergeTolerances::default();
        Self {
            grid_target: PipelineConfig::default().grid_target,
            use_lines: true,
            rho_fraction: m.rho_fraction,
            rho_floor: m.rho_floor,
            theta_deg: m.theta.to_degrees(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub tracking_iterations: usize,
    pub mapping_iterations: usize,
    pub cost_tolerance: f64,
    pub update_tolerance: f64,
    pub huber_point: f64,
    pub huber_line: f64,
    pub local_window: usize,
    pub global_ba: bool,
    pub min_disparity: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let p = PipelineConfig::default();
        Self {
            initial_lambda: p.mapping.initial_lambda,
            lambda_up: p.mapping.lambda_up,
            lambda_down: p.mapping.lambda_down,
            tracking_iterations: p.tracking.max_iterations,
            mapping_iterations: p.mapping.max_iterations,
            cost_tolerance: p.mapping.cost_tolerance,
            update_tolerance: p.mapping.update_tolerance,
            huber_point: p.huber_point,
            huber_line: p.huber_line,
            local_window: p.local_window,
            global_ba: p.global_ba,
            min_disparity: p.min_disparity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KeyframeSection {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub integral_clamp: f64,
    pub ratio: f64,
    pub velocity_gate: bool,
    /// Speed above which a keyframe is inserted (m/s).
    pub v_gate: f64,
    pub kalman_q: f64,
    pub kalman_r: f64,
}

impl Default for KeyframeSection {
    fn default() -> Self {
        let pid = PidState::default();
        let k = VelocityKalman::default();
        Self {
            kp: pid.kp,
            ki: pid.ki,
            kd: pid.kd,
            integral_clamp: pid.integral_clamp,
            ratio: 0.75,
            velocity_gate: true,
            v_gate: 7.0,
            kalman_q: k.q,
            kalman_r: k.r_meas,
        }
    }
}

/// Configuration of `run-sim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Configurations sampled by the Jacobian audit in the discrepancy report.
    pub audit_configurations: usize,
    pub world: WorldSection,
    pub camera: CameraSection,
    pub front_end: FrontEndSection,
    pub optimizer: OptimizerSection,
    pub keyframe: KeyframeSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            audit_configurations: 1000,
            world: WorldSection::default(),
            camera: CameraSection::default(),
            front_end: FrontEndSection::default(),
            optimizer: OptimizerSection::default(),
            keyframe: KeyframeSection::default(),
        }
    }
}

fn extent(min: Option<[f64; 3]>, max: Option<[f64; 3]>, what: &str) -> Result<Option<Extent>> {
    match (min, max) {
        (None, None) => Ok(None),
        (Some(a), Some(b)) => {
            let (a, b) = (Vector3::from(a), Vector3::from(b));
            ensure!((0..3).all(|i| a[i] <= b[i]), "{what}_min must not exceed {what}_max");
            Ok(Some(Extent::new(a, b)))
        }
        _ => bail!("{what}_min and {what}_max must be given together"),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).context("invalid run configuration")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn world_config(&self) -> Result<WorldConfig> {
        let w = &self.world;
        let trajectory = match w.trajectory {
            TrajectoryName::Circle => TrajectoryKind::Circle { radius: w.radius },
            TrajectoryName::Straightaway => TrajectoryKind::Straightaway,
            TrajectoryName::FigureEight => TrajectoryKind::FigureEight { radius: w.radius },
        };
        Ok(WorldConfig {
            seed: self.seed,
            n_points: w.n_points,
            n_lines: w.n_lines,
            extent: extent(w.extent_min, w.extent_max, "extent")?,
            far_points: w.far_points,
            far_extent: extent(w.far_extent_min, w.far_extent_max, "far_extent")?,
            trajectory,
            speed: w.speed,
            duration: w.duration,
            frame_rate: w.frame_rate,
            pixel_noise_sigma: w.pixel_noise_sigma,
            dropout_prob: w.dropout_prob,
            max_line_pieces: w.max_line_pieces,
            max_depth: w.max_depth,
            line_length: (w.line_length[0], w.line_length[1]),
            camera: self.camera.camera(),
        })
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        let o = &self.optimizer;
        let k = &self.keyframe;
        let lm = |iters: usize| LmSettings {
            initial_lambda: o.initial_lambda,
            lambda_up: o.lambda_up,
            lambda_down: o.lambda_down,
            max_iterations: iters,
            cost_tolerance: o.cost_tolerance,
            update_tolerance: o.update_tolerance,
            ..LmSettings::default()
        };
        PipelineConfig {
            grid_target: self.front_end.grid_target,
            merge: MergeTolerances {
                rho_fraction: self.front_end.rho_fraction,
                rho_floor: self.front_end.rho_floor,
                theta: self.front_end.theta_deg.to_radians(),
            },
            use_lines: self.front_end.use_lines,
            tracking: lm(o.tracking_iterations),
            mapping: lm(o.mapping_iterations),
            policy: PolicyParams {
                pid: PidState::new(k.kp, k.ki, k.kd, k.integral_clamp),
                kalman: VelocityKalman {
                    q: k.kalman_q,
                    r_meas: k.kalman_r,
                    ..VelocityKalman::default()
                },
                ratio: k.ratio,
                v_gate: k.velocity_gate.then_some(k.v_gate),
            },
            local_window: o.local_window,
            global_ba: o.global_ba,
            min_disparity: o.min_disparity,
            huber_point: o.huber_point,
            huber_line: o.huber_line,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        let k = &self.keyframe;
        let f = &self.front_end;
        ensure!(f.grid_target >= 2, "front_end.grid_target must be at least 2");
        ensure!(
            f.rho_fraction > 0.0 && f.rho_floor > 0.0 && f.theta_deg > 0.0,
            "front_end merge tolerances must be positive"
        );
        ensure!(
            o.initial_lambda > 0.0
                && o.lambda_up > 1.0
                && o.lambda_down > 0.0
                && o.lambda_down < 1.0
                && o.cost_tolerance > 0.0
                && o.update_tolerance > 0.0,
            "optimizer: lambdas and tolerances must be positive, with lambda_up > 1 and lambda_down < 1"
        );
        ensure!(
            o.tracking_iterations > 0 && o.mapping_iterations > 0,
            "optimizer iteration counts must be positive"
        );
        ensure!(o.huber_point > 0.0 && o.huber_line > 0.0, "Huber thresholds must be positive");
        ensure!(o.local_window >= 1, "optimizer.local_window must be at least 1");
        ensure!(o.min_disparity > 0.0, "optimizer.min_disparity must be positive");
        ensure!(
            k.kp >= 0.0 && k.ki >= 0.0 && k.kd >= 0.0 && k.integral_clamp >= 0.0,
            "keyframe gains and clamp must be non-negative"
        );
        ensure!(k.ratio > 0.0 && k.ratio <= 1.0, "keyframe.ratio must lie in (0, 1]");
        ensure!(k.v_gate > 0.0, "keyframe.v_gate must be positive");
        ensure!(k.kalman_q > 0.0 && k.kalman_r > 0.0, "Kalman noise terms must be positive");
        ensure!(self.audit_configurations > 0, "audit_configurations must be positive");
        self.world_config()?.validate()?;
        let cam = self.camera.camera();
        compute_grid_spec(cam.width, cam.height, f.grid_target)?;
        Ok(())
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

/// Writes every `(name, contents)` pair under `dir`, creating it first.
fn write_outputs(dir: &Path, files: &[(String, String)]) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    for (name, body) in files {
        let p = dir.join(name);
        fs::write(&p, body).with_context(|| format!("cannot write {}", p.display()))?;
    }
    Ok(())
}

fn timing_stats(samples_us: &mut [f64]) -> (f64, f64) {
    if samples_us.is_empty() {
        return (0.0, 0.0);
    }
    samples_us.sort_by(f64::total_cmp);
    let mean = samples_us.iter().sum::<f64>() / samples_us.len() as f64;
    let n = samples_us.len();
    let median = if n % 2 == 1 {
        samples_us[n / 2]
    } else {
        0.5 * (samples_us[n / 2 - 1] + samples_us[n / 2])
    };
    (mean, median)
}

pub fn cmd_suppress(a: &SuppressArgs) -> Result<String> {
    let text = read(&a.input)?;
    let points = parse_keypoints(&text).with_context(|| format!("in {}", a.input.display()))?;
    let spec = compute_grid_spec(a.width, a.height, a.target)?;
    if let Some(t) = a.tolerance {
        ensure!(t >= 0.0, "tolerance must be non-negative");
    }
    ensure!(a.scale_factor > 1.0, "scale factor must exceed 1");
    let run = || -> Result<Vec<_>> {
        Ok(match (a.levels, a.tolerance) {
            (Some(levels), _) => suppress_pyramid(&points, a.width, a.height, a.target, levels, a.scale_factor)?,
            (None, Some(t)) => select_with_tolerance(&points, &spec, t).points,
            (None, None) => suppress(&points, &spec),
        })
    };
    let selected = run()?;
    let mut samples = Vec::new();
    if !points.is_empty() {
        for _ in 0..a.repeats {
            let t0 = Instant::now();
            std::hint::black_box(run()?);
            samples.push(t0.elapsed().as_secs_f64() * 1e6);
        }
    }
    let (mean, median) = timing_stats(&mut samples);
    let timing = format!(
        "input_points,selected_points,repeats,mean_us,median_us\n{},{},{},{:.3},{:.3}\n",
        points.len(),
        selected.len(),
        samples.len(),
        mean,
        median
    );
    write_outputs(
        &a.out_dir,
        &[
            ("selected.txt".into(), format_keypoints(&selected)),
            ("suppress_timing.csv".into(), timing),
        ],
    )?;
    Ok(format!(
        "selected {} of {} keypoints (cell {:.2} px, radius {:.2} px, grid {}x{})\n",
        selected.len(),
        points.len(),
        spec.cell,
        spec.radius,
        spec.cols,
        spec.rows
    ))
}

pub fn cmd_merge(a: &MergeArgs) -> Result<String> {
    let text = read(&a.input)?;
    let mut segs = parse_segments(&text).with_context(|| format!("in {}", a.input.display()))?;
    if let Some((w, h)) = a.corner_origin {
        segs = segs.iter().map(|s| s.from_corner_origin(w, h)).collect();
    }
    ensure!(
        a.rho_fraction > 0.0 && a.rho_floor > 0.0 && a.theta_deg > 0.0,
        "merge tolerances must be positive"
    );
    let tol = MergeTolerances {
        rho_fraction: a.rho_fraction,
        rho_floor: a.rho_floor,
        theta: a.theta_deg.to_radians(),
    };
    let mut merged = merge_segments(&segs, &tol);
    if let Some((w, h)) = a.corner_origin {
        merged = merged.iter().map(|s| s.to_corner_origin(w, h)).collect();
    }
    let mut body = format_segments(&merged);
    if a.corner_origin.is_some() {
        body = body.replacen("image-center origin", "top-left origin", 1);
    }
    write_outputs(&a.out_dir, &[("merged.txt".into(), body)])?;
    Ok(format!("merged {} segments into {}\n", segs.len(), merged.len()))
}

pub fn cmd_ba(a: &BaArgs) -> Result<String> {
    let text = read(&a.input)?;
    let mut graph = read_graph(&text, None).with_context(|| format!("in {}", a.input.display()))?;
    let mode = match a.mode {
        BaMode::PoseOnly => OptimizeMode::PoseOnly,
        BaMode::Global => OptimizeMode::GlobalBa,
        BaMode::Local => {
            ensure!(!a.window.is_empty(), "--mode local needs --window");
            OptimizeMode::LocalBa {
                window: a.window.clone(),
            }
        }
    };
    ensure!(a.max_iterations > 0, "max iterations must be positive");
    let settings = LmSettings {
        max_iterations: a.max_iterations,
        solver: LinearSolver::Auto,
        ..LmSettings::default()
    };
    let rep = optimize(&mut graph, &settings, &mode)?;
    let mut report = String::new();
    let _ = writeln!(report, "initial_cost {:.9e}", rep.initial_cost);
    let _ = writeln!(report, "final_cost {:.9e}", rep.final_cost);
    let _ = writeln!(report, "iterations {}", rep.iterations);
    let _ = writeln!(report, "termination {:?}", rep.termination);
    let _ = writeln!(report, "culled {}", rep.culled);
    let _ = writeln!(report, "point_outliers {:?}", rep.point_outliers);
    let _ = writeln!(report, "line_outliers {:?}", rep.line_outliers);
    let history: Vec<String> = rep.cost_history.iter().map(|c| format!("{c:.9e}")).collect();
    let _ = writeln!(report, "cost_history {}", history.join(" "));
    write_outputs(
        &a.out_dir,
        &[
            ("optimized_graph.txt".into(), write_graph(&graph)),
            ("ba_report.txt".into(), report.clone()),
        ],
    )?;
    Ok(report)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<String> {
    let (est, fe) = parse_trajectory(&read(&a.estimate)?).with_context(|| format!("in {}", a.estimate.display()))?;
    let (gt, fg) = parse_trajectory(&read(&a.truth)?).with_context(|| format!("in {}", a.truth.display()))?;
    ensure!(
        (fe == TrajectoryFormat::Kitti) == (fg == TrajectoryFormat::Kitti),
        "KITTI files carry no timestamps and can only be compared with another KITTI file"
    );
    ensure!(a.max_dt >= 0.0, "max_dt must be non-negative");
    let report = eval::evaluate(&est, &gt, !a.no_align, a.delta, a.max_dt)?;
    let mut files = vec![
        ("metrics.csv".into(), report.to_csv()),
        ("metrics.txt".into(), report.to_table()),
    ];
    if a.svg {
        files.push(("ate_over_time.svg".into(), report.to_svg()));
    }
    write_outputs(&a.out_dir, &files)?;
    Ok(report.to_table())
}

pub fn cmd_run_sim(a: &RunSimArgs) -> Result<String> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::parse(&read(p)?).with_context(|| format!("in {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = &a.out_dir {
        cfg.output_dir = d.clone();
    }
    cfg.validate()?;
    let world_cfg = cfg.world_config()?;
    let world = generate_world(&world_cfg)?;
    let result = run_pipeline(&world, &cfg.pipeline_config())?;

    let metrics = eval::evaluate(&result.estimate, &result.truth, false, 1, eval::DEFAULT_MAX_DT)?;
    let mut summary = metrics.to_table();
    let aligned = match eval::ate_rmse(&result.estimate, &result.truth, true) {
        Ok(v) => format!("{v:.6}"),
        Err(e) => format!("unavailable ({e})"),
    };
    let _ = writeln!(summary, "{:<22}{:>14}", "ATE aligned (m)", aligned);
    let _ = writeln!(summary, "{:<22}{:>14}", "frames", result.truth.len());
    let _ = writeln!(summary, "{:<22}{:>14}", "keyframes", result.keyframes.len());
    let _ = writeln!(summary, "{:<22}{:>14}", "map points", result.map_points);
    let _ = writeln!(summary, "{:<22}{:>14}", "map lines", result.map_lines);
    let _ = writeln!(summary, "{:<22}{:>14.1}", "mean tracked inliers", result.mean_inliers);

    let cam = world_cfg.camera;
    let grids: Vec<_> = [(cam.width, cam.height, cfg.front_end.grid_target), (640, 480, 1000), (1241, 376, 2000)]
        .iter()
        .map(|&(w, h, n)| audit_grid(w, h, n))
        .collect::<Result<_, _>>()?;
    let audit = audit_jacobians(cfg.audit_configurations, cfg.seed, &cam);

    let mut files = vec![
        ("estimate_tum.txt".to_string(), format_tum(&result.estimate)),
        ("estimate_kitti.txt".to_string(), format_kitti(&result.estimate)),
        ("truth_tum.txt".to_string(), format_tum(&result.truth)),
        ("truth_kitti.txt".to_string(), format_kitti(&result.truth)),
        ("decisions.csv".to_string(), format_decision_log(&result.decisions)),
        ("metrics.csv".to_string(), metrics.to_csv()),
        ("metrics.txt".to_string(), summary.clone()),
        ("ate_over_time.svg".to_string(), metrics.to_svg()),
        ("discrepancy.txt".to_string(), format_report(&audit, &grids)),
        ("config_used.toml".to_string(), toml::to_string(&cfg)?),
    ];
    if a.dump_frames {
        let frames = render_all(&world);
        files.push(("world_graph.txt".into(), write_graph(&observation_graph(&world, &frames))));
        for f in &frames {
            files.push((format!("frame_{:04}_keypoints.txt", f.index), format_keypoints(&f.keypoints(&world))));
            files.push((format!("frame_{:04}_segments.txt", f.index), format_segments(&f.segments().0)));
        }
    }
    write_outputs(&cfg.output_dir, &files)?;
    Ok(summary)
}

pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::Suppress(a) => cmd_suppress(a),
        Command::MergeLines(a) => cmd_merge(a),
        Command::Ba(a) => cmd_ba(a),
        Command::RunSim(a) => cmd_run_sim(a),
        Command::Eval(a) => cmd_eval(a),
    }
}
