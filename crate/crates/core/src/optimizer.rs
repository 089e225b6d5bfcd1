//! Robust Levenberg–Marquardt over a graph of stereo poses, point landmarks
//! and line landmarks.
//!
//! The objective is `sum rho_p(e_p' W_p e_p) + sum rho_l(e_l' W_l e_l)` with
//! Huber `rho` and scalar information `W`. Each iteration solves the damped
//! normal equations `(H + lambda D) dx = -g`, where `D` is the clamped diagonal
//! of `H`, either densely or through the landmark Schur complement.

use crate::factors::{
    line_jacobians, line_residual_stereo, point_jacobians, point_residual, FactorError, LineLandmark,
    LineObservation, PointObservation,
};
use crate::geometry::{Pose, StereoCamera, Twist};
use crate::textio::{self, ParseError};
use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3, Vector6};
use rayon::prelude::*;
use thiserror::Error;

/// Chi-square 95% quantile for 3 degrees of freedom.
pub const CHI2_3DOF_95: f64 = 7.815;
/// Chi-square 95% quantile for 2 degrees of freedom.
pub const CHI2_2DOF_95: f64 = 5.991;
/// Scalar information applied to line factors (per unit sigma).
pub const LINE_INFORMATION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimizeError {
    #[error("damped normal equations are not positive definite at lambda = {lambda:e}")]
    SingularSystem { lambda: f64 },
    #[error("landmarks are free but no pose is held fixed")]
    GaugeFreedom,
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseNode {
    pub pose: Pose,
    pub fixed: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointFactor {
    pub pose: usize,
    pub landmark: usize,
    pub obs: PointObservation,
    pub information: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFactor {
    pub pose: usize,
    pub landmark: usize,
    pub obs: LineObservation,
    pub information: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorGraph {
    pub camera: StereoCamera,
    pub poses: Vec<PoseNode>,
    pub points: Vec<Vector3<f64>>,
    pub lines: Vec<LineLandmark>,
    pub point_factors: Vec<PointFactor>,
    pub line_factors: Vec<LineFactor>,
    pub huber_point: f64,
    pub huber_line: f64,
}

impl FactorGraph {
    pub fn new(camera: StereoCamera) -> Self {
        Self {
            camera,
            poses: Vec::new(),
            points: Vec::new(),
            lines: Vec::new(),
            point_factors: Vec::new(),
            line_factors: Vec::new(),
            huber_point: CHI2_3DOF_95.sqrt(),
            huber_line: CHI2_2DOF_95.sqrt(),
        }
    }

    pub fn add_pose(&mut self, pose: Pose, fixed: bool) -> usize {
        self.poses.push(PoseNode { pose, fixed });
        self.poses.len() - 1
    }

    pub fn add_point(&mut self, p: Vector3<f64>) -> usize {
        self.points.push(p);
        self.points.len() - 1
    }

    pub fn add_line(&mut self, l: LineLandmark) -> usize {
        self.lines.push(l);
        self.lines.len() - 1
    }

    /// Point factor with information `1 / sigma²`.
    pub fn add_point_factor(&mut self, pose: usize, landmark: usize, obs: PointObservation) {
        self.point_factors.push(PointFactor {
            pose,
            landmark,
            obs,
            information: 1.0 / (obs.sigma * obs.sigma),
        });
    }

    /// Line factor with information `LINE_INFORMATION / sigma²`.
    pub fn add_line_factor(&mut self, pose: usize, landmark: usize, obs: LineObservation) {
        self.line_factors.push(LineFactor {
            pose,
            landmark,
            obs,
            information: LINE_INFORMATION / (obs.sigma * obs.sigma),
        });
    }

    pub fn validate(&self) -> Result<(), OptimizeError> {
        let bad = |m: String| Err(OptimizeError::InvalidGraph(m));
        if !self.camera.is_valid() {
            return bad("camera intrinsics must be positive".into());
        }
        for (i, f) in self.point_factors.iter().enumerate() {
            if f.pose >= self.poses.len() || f.landmark >= self.points.len() {
                return bad(format!("point factor {i} references a missing variable"));
            }
            if !(f.obs.sigma > 0.0) {
                return bad(format!("point factor {i} has non-positive sigma"));
            }
        }
        for (i, f) in self.line_factors.iter().enumerate() {
            if f.pose >= self.poses.len() || f.landmark >= self.lines.len() {
                return bad(format!("line factor {i} references a missing variable"));
            }
            if !(f.obs.sigma > 0.0) {
                return bad(format!("line factor {i} has non-positive sigma"));
            }
        }
        for (i, l) in self.lines.iter().enumerate() {
            if (l.start - l.end).norm() <= 1e-6 {
                return bad(format!("line landmark {i} has coincident endpoints"));
            }
        }
        Ok(())
    }
}

/// Huber penalty on a squared weighted residual. Returns the cost and its
/// derivative with respect to `r2`, used as the IRLS weight.
pub fn huber_cost(r2: f64, delta: f64) -> (f64, f64) {
    let r = r2.sqrt();
    if r <= delta {
        (r2, 1.0)
    } else {
        (2.0 * delta * r - delta * delta, delta / r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostSummary {
    pub cost: f64,
    pub point_cost: f64,
    pub line_cost: f64,
    /// Factors that could not be evaluated (depth at or behind the near plane).
    pub culled: usize,
}

fn point_r2(graph: &FactorGraph, f: &PointFactor) -> Result<f64, FactorError> {
    let e = point_residual(
        &graph.poses[f.pose].pose,
        &graph.points[f.landmark],
        &f.obs,
        &graph.camera,
    )?;
    Ok(f.information * e.norm_squared())
}

fn line_r2(graph: &FactorGraph, f: &LineFactor) -> Result<f64, FactorError> {
    let e = line_residual_stereo(&graph.poses[f.pose].pose, &graph.lines[f.landmark], &f.obs, &graph.camera)?;
    Ok(f.information * e.norm_squared())
}

/// Robust cost; each culled factor adds `culled_penalty` instead of a residual.
pub fn evaluate_cost(graph: &FactorGraph, culled_penalty: f64) -> CostSummary {
    let mut s = CostSummary::default();
    let points: Vec<Option<f64>> = graph
        .point_factors
        .par_iter()
        .map(|f| point_r2(graph, f).ok())
        .collect();
    for r2 in points {
        match r2 {
            Some(r2) => s.point_cost += huber_cost(r2, graph.huber_point).0,
            None => {
                s.culled += 1;
                s.point_cost += culled_penalty;
            }
        }
    }
    let lines: Vec<Option<f64>> = graph.line_factors.par_iter().map(|f| line_r2(graph, f).ok()).collect();
    for r2 in lines {
        match r2 {
            Some(r2) => s.line_cost += huber_cost(r2, graph.huber_line).0,
            None => {
                s.culled += 1;
                s.line_cost += culled_penalty;
            }
        }
    }
    s.cost = s.point_cost + s.line_cost;
    s
}

pub fn total_cost(graph: &FactorGraph) -> f64 {
    evaluate_cost(graph, 0.0).cost
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum OptimizeMode {
    /// Poses free (except those flagged fixed), every landmark fixed.
    #[default]
    PoseOnly,
    /// The listed poses are free together with every landmark they observe.
    LocalBa { window: Vec<usize> },
    /// Every variable free except pose 0 and poses flagged fixed.
    GlobalBa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LinearSolver {
    /// Schur complement when free landmark dimensions outnumber pose dimensions.
    #[default]
    Auto,
    Dense,
    Schur,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmSettings {
    pub initial_lambda: f64,
    pub lambda_up: f64,
    pub lambda_down: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub max_iterations: usize,
    /// Stop when the relative decrease of an accepted step falls below this.
    pub cost_tolerance: f64,
    /// Stop when the step norm falls below this.
    pub update_tolerance: f64,
    /// Stop as soon as the cost is at or below this absolute value.
    pub cost_floor: f64,
    pub culled_penalty: f64,
    /// Outlier threshold multiplier on `delta²`.
    pub outlier_factor: f64,
    pub solver: LinearSolver,
}

impl Default for LmSettings {
    fn default() -> Self {
        Self {
            initial_lambda: 1e-4,
            lambda_up: 10.0,
            lambda_down: 0.5,
            lambda_min: 1e-9,
            lambda_max: 1e12,
            max_iterations: 50,
            cost_tolerance: 1e-12,
            update_tolerance: 1e-12,
            cost_floor: 1e-24,
            culled_penalty: 0.0,
            outlier_factor: 1.0,
            solver: LinearSolver::Auto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    CostFloor,
    CostTolerance,
    UpdateTolerance,
    MaxIterations,
    /// No step decreased the cost before lambda exceeded its maximum.
    Stalled,
    /// Nothing to optimize.
    NoFreeVariables,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    /// Accepted steps.
    pub iterations: usize,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    pub termination: Termination,
    pub point_chi2: Vec<Option<f64>>,
    pub line_chi2: Vec<Option<f64>>,
    pub point_outliers: Vec<usize>,
    pub line_outliers: Vec<usize>,
    pub culled: usize,
}

impl OptimizeReport {
    pub fn is_monotone(&self) -> bool {
        self.cost_history.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Index of each variable inside the solver's state vector.
#[derive(Debug, Clone)]
struct Layout {
    pose_slot: Vec<Option<usize>>,
    point_slot: Vec<Option<usize>>,
    line_slot: Vec<Option<usize>>,
    free_poses: Vec<usize>,
    /// (kind, landmark id, dim) for each free landmark in slot order
    landmarks: Vec<(LandmarkKind, usize)>,
    landmark_offset: Vec<usize>,
    landmark_dofs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LandmarkKind {
    Point,
    Line,
}

impl LandmarkKind {
    fn dim(self) -> usize {
        match self {
            LandmarkKind::Point => 3,
            LandmarkKind::Line => 6,
        }
    }
}

impl Layout {
    fn build(graph: &FactorGraph, mode: &OptimizeMode) -> Result<Layout, OptimizeError> {
        let np = graph.poses.len();
        let mut pose_free = vec![false; np];
        let mut point_free = vec![false; graph.points.len()];
        let mut line_free = vec![false; graph.lines.len()];
        match mode {
            OptimizeMode::PoseOnly => {
                for (i, p) in graph.poses.iter().enumerate() {
                    pose_free[i] = !p.fixed;
                }
            }
            OptimizeMode::LocalBa { window } => {
                for &i in window {
                    if i >= np {
                        return Err(OptimizeError::InvalidGraph(format!("window pose {i} does not exist")));
                    }
                    pose_free[i] = !graph.poses[i].fixed;
                }
                let in_window = |i: usize| window.contains(&i);
                for f in &graph.point_factors {
                    if in_window(f.pose) {
                        point_free[f.landmark] = true;
                    }
                }
                for f in &graph.line_factors {
                    if in_window(f.pose) {
                        line_free[f.landmark] = true;
                    }
                }
            }
            OptimizeMode::GlobalBa => {
                for (i, p) in graph.poses.iter().enumerate() {
                    pose_free[i] = i != 0 && !p.fixed;
                }
                for f in &graph.point_factors {
                    point_free[f.landmark] = true;
                }
                for f in &graph.line_factors {
                    line_free[f.landmark] = true;
                }
            }
        }
        let any_landmark_free = point_free.iter().chain(line_free.iter()).any(|&b| b);
        if any_landmark_free && pose_free.iter().all(|&b| b) {
            return Err(OptimizeError::GaugeFreedom);
        }

        let mut pose_slot = vec![None; np];
        let mut free_poses = Vec::new();
        for i in 0..np {
            if pose_free[i] {
                pose_slot[i] = Some(free_poses.len());
                free_poses.push(i);
            }
        }
        let mut landmarks = Vec::new();
        let mut landmark_offset = Vec::new();
        let mut point_slot = vec![None; graph.points.len()];
        let mut line_slot = vec![None; graph.lines.len()];
        let mut off = 0;
        for (i, &f) in point_free.iter().enumerate() {
            if f {
                point_slot[i] = Some(landmarks.len());
                landmarks.push((LandmarkKind::Point, i));
                landmark_offset.push(off);
                off += 3;
            }
        }
        for (i, &f) in line_free.iter().enumerate() {
            if f {
                line_slot[i] = Some(landmarks.len());
                landmarks.push((LandmarkKind::Line, i));
                landmark_offset.push(off);
                off += 6;
            }
        }
        Ok(Layout {
            pose_slot,
            point_slot,
            line_slot,
            free_poses,
            landmarks,
            landmark_offset,
            landmark_dofs: off,
        })
    }

    fn pose_dofs(&self) -> usize {
        6 * self.free_poses.len()
    }

    fn total_dofs(&self) -> usize {
        self.pose_dofs() + self.landmark_dofs
    }
}

/// Linearized contribution of one factor.
struct Contribution {
    pose_slot: Option<usize>,
    landmark_slot: Option<usize>,
    hpp: Matrix6<f64>,
    hpl: DMatrix<f64>,
    hll: DMatrix<f64>,
    gp: Vector6<f64>,
    gl: DVector<f64>,
}

/// Normal equations `H dx = -g` in block form.
struct NormalEquations {
    hpp: DMatrix<f64>,
    gp: DVector<f64>,
    hll: Vec<DMatrix<f64>>,
    gl: Vec<DVector<f64>>,
    /// Off-diagonal blocks grouped by landmark slot: (pose slot, 6×k block).
    hpl: Vec<Vec<(usize, DMatrix<f64>)>>,
}

fn linearize_point(graph: &FactorGraph, layout: &Layout, f: &PointFactor) -> Option<Contribution> {
    let pose_slot = layout.pose_slot[f.pose];
    let landmark_slot = layout.point_slot[f.landmark];
    if pose_slot.is_none() && landmark_slot.is_none() {
        return None;
    }
    let pose = &graph.poses[f.pose].pose;
    let p = &graph.points[f.landmark];
    let e = point_residual(pose, p, &f.obs, &graph.camera).ok()?;
    let (jp, jl) = point_jacobians(pose, p, &graph.camera).ok()?;
    let (_, w) = huber_cost(f.information * e.norm_squared(), graph.huber_point);
    let wt = w * f.information;
    let jlt: Matrix3<f64> = jl.transpose();
    Some(Contribution {
        pose_slot,
        landmark_slot,
        hpp: jp.transpose() * jp * wt,
        hpl: DMatrix::from_column_slice(6, 3, (jp.transpose() * jl * wt).as_slice()),
        hll: DMatrix::from_column_slice(3, 3, (jlt * jl * wt).as_slice()),
        gp: jp.transpose() * e * wt,
        gl: DVector::from_column_slice((jlt * e * wt).as_slice()),
    })
}

fn linearize_line(graph: &FactorGraph, layout: &Layout, f: &LineFactor) -> Option<Contribution> {
    let pose_slot = layout.pose_slot[f.pose];
    let landmark_slot = layout.line_slot[f.landmark];
    if pose_slot.is_none() && landmark_slot.is_none() {
        return None;
    }
    let pose = &graph.poses[f.pose].pose;
    let l = &graph.lines[f.landmark];
    let e = line_residual_stereo(pose, l, &f.obs, &graph.camera).ok()?;
    let (jp, js, je) = line_jacobians(pose, l, &f.obs, &graph.camera).ok()?;
    let (_, w) = huber_cost(f.information * e.norm_squared(), graph.huber_line);
    let wt = w * f.information;
    let mut jl = DMatrix::zeros(2, 6);
    jl.view_mut((0, 0), (2, 3)).copy_from(&js);
    jl.view_mut((0, 3), (2, 3)).copy_from(&je);
    let jp_d = DMatrix::from_column_slice(2, 6, jp.as_slice());
    let e_d = DVector::from_column_slice(e.as_slice());
    Some(Contribution {
        pose_slot,
        landmark_slot,
        hpp: jp.transpose() * jp * wt,
        hpl: jp_d.transpose() * &jl * wt,
        hll: jl.transpose() * &jl * wt,
        gp: jp.transpose() * e * wt,
        gl: jl.transpose() * e_d * wt,
    })
}

fn linearize(graph: &FactorGraph, layout: &Layout) -> NormalEquations {
    let np = layout.pose_dofs();
    let nl = layout.landmarks.len();
    let mut ne = NormalEquations {
        hpp: DMatrix::zeros(np, np),
        gp: DVector::zeros(np),
        hll: layout
            .landmarks
            .iter()
            .map(|(k, _)| DMatrix::zeros(k.dim(), k.dim()))
            .collect(),
        gl: layout.landmarks.iter().map(|(k, _)| DVector::zeros(k.dim())).collect(),
        hpl: vec![Vec::new(); nl],
    };
    let mut parts: Vec<Contribution> = graph
        .point_factors
        .par_iter()
        .filter_map(|f| linearize_point(graph, layout, f))
        .collect();
    parts.extend(
        graph
            .line_factors
            .par_iter()
            .filter_map(|f| linearize_line(graph, layout, f))
            .collect::<Vec<_>>(),
    );
    for c in parts {
        if let Some(ps) = c.pose_slot {
            let o = 6 * ps;
            let mut blk = ne.hpp.view_mut((o, o), (6, 6));
            blk += c.hpp;
            let mut g = ne.gp.rows_mut(o, 6);
            g += c.gp;
        }
        if let Some(ls) = c.landmark_slot {
            ne.hll[ls] += &c.hll;
            ne.gl[ls] += &c.gl;
            if let Some(ps) = c.pose_slot {
                match ne.hpl[ls].iter_mut().find(|(p, _)| *p == ps) {
                    Some((_, b)) => *b += &c.hpl,
                    None => ne.hpl[ls].push((ps, c.hpl)),
                }
            }
        }
    }
    ne
}

fn damping_diag(h: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(h.nrows(), (0..h.nrows()).map(|i| h[(i, i)].clamp(1e-6, 1e32)))
}

fn add_damping(h: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
    let d = damping_diag(h);
    let mut out = h.clone();
    for i in 0..h.nrows() {
        out[(i, i)] += lambda * d[i];
    }
    out
}

impl NormalEquations {
    fn gradient(&self, layout: &Layout) -> DVector<f64> {
        let mut g = DVector::zeros(layout.total_dofs());
        g.rows_mut(0, layout.pose_dofs()).copy_from(&self.gp);
        for (s, gl) in self.gl.iter().enumerate() {
            g.rows_mut(layout.pose_dofs() + layout.landmark_offset[s], gl.len()).copy_from(gl);
        }
        g
    }

    fn solve_dense(&self, layout: &Layout, lambda: f64) -> Option<DVector<f64>> {
        let np = layout.pose_dofs();
        let n = layout.total_dofs();
        let mut h = DMatrix::zeros(n, n);
        h.view_mut((0, 0), (np, np)).copy_from(&self.hpp);
        for (s, hll) in self.hll.iter().enumerate() {
            let o = np + layout.landmark_offset[s];
            let k = hll.nrows();
            h.view_mut((o, o), (k, k)).copy_from(hll);
            for (ps, b) in &self.hpl[s] {
                h.view_mut((6 * ps, o), (6, k)).copy_from(b);
                h.view_mut((o, 6 * ps), (k, 6)).copy_from(&b.transpose());
            }
        }
        let h = add_damping(&h, lambda);
        let chol = h.cholesky()?;
        Some(-chol.solve(&self.gradient(layout)))
    }

    fn solve_schur(&self, layout: &Layout, lambda: f64) -> Option<DVector<f64>> {
        let np = layout.pose_dofs();
        let mut s = add_damping(&self.hpp, lambda);
        // reduced right-hand side: -(gp - W Hll^-1 gl)
        let mut rhs = -self.gp.clone();
        let mut inverses = Vec::with_capacity(self.hll.len());
        for (l, hll) in self.hll.iter().enumerate() {
            let inv = add_damping(hll, lambda).cholesky()?.inverse();
            let inv_gl = &inv * &self.gl[l];
            let blocks = &self.hpl[l];
            for (pa, wa) in blocks {
                let wa_inv = wa * &inv;
                let mut r = rhs.rows_mut(6 * pa, 6);
                r += &wa_inv * &self.gl[l];
                for (pb, wb) in blocks {
                    let mut blk = s.view_mut((6 * pa, 6 * pb), (6, 6));
                    blk -= &wa_inv * wb.transpose();
                }
            }
            inverses.push((inv, inv_gl));
        }
        let dp = if np > 0 { s.cholesky()?.solve(&rhs) } else { DVector::zeros(0) };
        let mut dx = DVector::zeros(layout.total_dofs());
        dx.rows_mut(0, np).copy_from(&dp);
        for (l, (inv, inv_gl)) in inverses.iter().enumerate() {
            // dl = -Hll^-1 (gl + W' dp)
            let mut wt_dp = DVector::zeros(self.gl[l].len());
            for (pa, wa) in &self.hpl[l] {
                wt_dp += wa.transpose() * dp.rows(6 * pa, 6);
            }
            let dl = -(inv_gl + inv * wt_dp);
            dx.rows_mut(np + layout.landmark_offset[l], dl.len()).copy_from(&dl);
        }
        Some(dx)
    }

    fn solve(&self, layout: &Layout, lambda: f64, solver: LinearSolver) -> Option<DVector<f64>> {
        let use_schur = match solver {
            LinearSolver::Dense => false,
            LinearSolver::Schur => true,
            LinearSolver::Auto => !self.hll.is_empty() && layout.landmark_dofs > layout.pose_dofs(),
        };
        let dx = if use_schur {
            self.solve_schur(layout, lambda)?
        } else {
            self.solve_dense(layout, lambda)?
        };
        dx.iter().all(|v| v.is_finite()).then_some(dx)
    }
}

fn apply_update(graph: &mut FactorGraph, layout: &Layout, dx: &DVector<f64>) {
    for (slot, &pi) in layout.free_poses.iter().enumerate() {
        let xi = Twist::from_iterator(dx.rows(6 * slot, 6).iter().copied());
        let node = &mut graph.poses[pi];
        node.pose = node.pose.retract(&xi).normalized();
    }
    let base = layout.pose_dofs();
    for (slot, &(kind, id)) in layout.landmarks.iter().enumerate() {
        let o = base + layout.landmark_offset[slot];
        match kind {
            LandmarkKind::Point => {
                graph.points[id] += Vector3::new(dx[o], dx[o + 1], dx[o + 2]);
            }
            LandmarkKind::Line => {
                let l = &mut graph.lines[id];
                l.start += Vector3::new(dx[o], dx[o + 1], dx[o + 2]);
                l.end += Vector3::new(dx[o + 3], dx[o + 4], dx[o + 5]);
            }
        }
    }
}

/// Gradient of `total_cost` with respect to the free variables of `mode`,
/// ordered as free poses (6 each, twist order) then free points (3 each) then
/// free lines (start, end).
pub fn cost_gradient(graph: &FactorGraph, mode: &OptimizeMode) -> Result<DVector<f64>, OptimizeError> {
    let layout = Layout::build(graph, mode)?;
    Ok(linearize(graph, &layout).gradient(&layout) * 2.0)
}

/// Minimizes the robust cost in place.
pub fn optimize(
    graph: &mut FactorGraph,
    settings: &LmSettings,
    mode: &OptimizeMode,
) -> Result<OptimizeReport, OptimizeError> {
    graph.validate()?;
    let layout = Layout::build(graph, mode)?;
    let mut current = evaluate_cost(graph, settings.culled_penalty);
    let initial_cost = current.cost;
    let mut history = vec![current.cost];
    let mut lambda = settings.initial_lambda;
    let mut iterations = 0;

    let termination = if layout.total_dofs() == 0 {
        Termination::NoFreeVariables
    } else {
        'outer: loop {
            if current.cost <= settings.cost_floor {
                break Termination::CostFloor;
            }
            if iterations >= settings.max_iterations {
                break Termination::MaxIterations;
            }
            let ne = linearize(graph, &layout);
            loop {
                let Some(dx) = ne.solve(&layout, lambda, settings.solver) else {
                    if lambda >= settings.lambda_max {
                        return Err(OptimizeError::SingularSystem { lambda });
                    }
                    lambda = (lambda * settings.lambda_up).min(settings.lambda_max);
                    continue;
                };
                let mut trial = graph.clone();
                apply_update(&mut trial, &layout, &dx);
                let next = evaluate_cost(&trial, settings.culled_penalty);
                if next.cost < current.cost && next.culled <= current.culled {
                    let decrease = (current.cost - next.cost) / current.cost.max(f64::MIN_POSITIVE);
                    *graph = trial;
                    current = next;
                    history.push(current.cost);
                    iterations += 1;
                    lambda = (lambda * settings.lambda_down).max(settings.lambda_min);
                    if decrease < settings.cost_tolerance {
                        break 'outer Termination::CostTolerance;
                    }
                    if dx.norm() < settings.update_tolerance {
                        break 'outer Termination::UpdateTolerance;
                    }
                    continue 'outer;
                }
                if dx.norm() < settings.update_tolerance {
                    break 'outer Termination::UpdateTolerance;
                }
                if lambda >= settings.lambda_max {
                    break 'outer Termination::Stalled;
                }
                lambda = (lambda * settings.lambda_up).min(settings.lambda_max);
            }
        }
    };

    let (point_chi2, line_chi2, point_outliers, line_outliers) = classify(graph, settings.outlier_factor);
    Ok(OptimizeReport {
        initial_cost,
        final_cost: current.cost,
        iterations,
        cost_history: history,
        termination,
        point_chi2,
        line_chi2,
        point_outliers,
        line_outliers,
        culled: current.culled,
    })
}

type Classification = (Vec<Option<f64>>, Vec<Option<f64>>, Vec<usize>, Vec<usize>);

/// Per-factor chi² and outlier lists; an outlier's robust cost exceeds
/// `delta² * factor`.
fn classify(graph: &FactorGraph, factor: f64) -> Classification {
    let pc: Vec<Option<f64>> = graph.point_factors.iter().map(|f| point_r2(graph, f).ok()).collect();
    let lc: Vec<Option<f64>> = graph.line_factors.iter().map(|f| line_r2(graph, f).ok()).collect();
    let outliers = |chi: &[Option<f64>], delta: f64| {
        chi.iter()
            .enumerate()
            .filter(|(_, c)| c.is_none_or(|r2| huber_cost(r2, delta).0 > delta * delta * factor))
            .map(|(i, _)| i)
            .collect::<Vec<_>>()
    };
    let po = outliers(&pc, graph.huber_point);
    let lo = outliers(&lc, graph.huber_line);
    (pc, lc, po, lo)
}

fn pose_row_major(p: &Pose) -> [f64; 12] {
    let r = &p.rotation;
    let t = &p.translation;
    [
        r[(0, 0)],
        r[(0, 1)],
        r[(0, 2)],
        t.x,
        r[(1, 0)],
        r[(1, 1)],
        r[(1, 2)],
        t.y,
        r[(2, 0)],
        r[(2, 1)],
        r[(2, 2)],
        t.z,
    ]
}

pub(crate) fn pose_from_row_major(v: &[f64]) -> Pose {
    Pose::new(
        Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]),
        Vector3::new(v[3], v[7], v[11]),
    )
}

/// Serializes the graph, one record per line.
pub fn write_graph(graph: &FactorGraph) -> String {
    let mut out = String::from("# plslam factor graph\n");
    let c = &graph.camera;
    out.push_str("CAMERA ");
    textio::push_floats(&mut out, &[c.fx, c.fy, c.cx, c.cy, c.bf]);
    out.push_str(&format!(" {} {}\n", c.width, c.height));
    for (i, p) in graph.poses.iter().enumerate() {
        out.push_str(&format!("POSE {i} {} ", u8::from(p.fixed)));
        textio::push_floats(&mut out, &pose_row_major(&p.pose));
        out.push('\n');
    }
    for (i, p) in graph.points.iter().enumerate() {
        out.push_str(&format!("PT {i} "));
        textio::push_floats(&mut out, p.as_slice());
        out.push('\n');
    }
    for (i, l) in graph.lines.iter().enumerate() {
        out.push_str(&format!("LINE {i} "));
        textio::push_floats(&mut out, &[l.start.x, l.start.y, l.start.z, l.end.x, l.end.y, l.end.z]);
        out.push('\n');
    }
    for f in &graph.point_factors {
        out.push_str(&format!("PFACTOR {} {} ", f.pose, f.landmark));
        textio::push_floats(&mut out, &[f.obs.ul, f.obs.vl, f.obs.ur, f.obs.sigma]);
        out.push('\n');
    }
    for f in &graph.line_factors {
        out.push_str(&format!("LFACTOR {} {} ", f.pose, f.landmark));
        let o = &f.obs;
        textio::push_floats(
            &mut out,
            &[o.line.lx, o.line.ly, o.line.lz, o.u_start_right, o.u_end_right, o.sigma],
        );
        out.push('\n');
    }
    out
}

/// Parses the graph format. Variable indices must be contiguous from 0 and
/// every factor must follow the variables it references. A `CAMERA` record is
/// required unless `default_camera` is supplied.
pub fn read_graph(text: &str, default_camera: Option<StereoCamera>) -> Result<FactorGraph, ParseError> {
    let mut graph = FactorGraph::new(default_camera.unwrap_or(StereoCamera::vga()));
    let mut have_camera = default_camera.is_some();
    let expect_index = |line: usize, token: &str, next: usize, what: &str| -> Result<(), ParseError> {
        let i = textio::parse_usize(line, token)?;
        if i != next {
            return Err(ParseError::new(line, format!("expected {what} index {next}, found {i}")));
        }
        Ok(())
    };
    for (line, tokens) in textio::records(text) {
        match tokens[0] {
            "CAMERA" => {
                textio::expect_len(line, &tokens, 8, "CAMERA")?;
                let v = textio::parse_floats(line, &tokens[1..6])?;
                let w = tokens[6]
                    .parse::<u32>()
                    .map_err(|_| ParseError::new(line, "invalid image width"))?;
                let h = tokens[7]
                    .parse::<u32>()
                    .map_err(|_| ParseError::new(line, "invalid image height"))?;
                graph.camera = StereoCamera {
                    fx: v[0],
                    fy: v[1],
                    cx: v[2],
                    cy: v[3],
                    bf: v[4],
                    width: w,
                    height: h,
                };
                if !graph.camera.is_valid() {
                    return Err(ParseError::new(line, "camera parameters must be positive"));
                }
                have_camera = true;
            }
            "POSE" => {
                textio::expect_len(line, &tokens, 15, "POSE")?;
                expect_index(line, tokens[1], graph.poses.len(), "pose")?;
                let fixed = match tokens[2] {
                    "0" => false,
                    "1" => true,
                    t => return Err(ParseError::new(line, format!("fixed flag must be 0 or 1, found `{t}`"))),
                };
                let v = textio::parse_floats(line, &tokens[3..])?;
                let pose = pose_from_row_major(&v);
                if pose.orthonormality_error() > 1e-6 {
                    return Err(ParseError::new(line, "rotation is not orthonormal"));
                }
                graph.add_pose(pose, fixed);
            }
            "PT" => {
                textio::expect_len(line, &tokens, 5, "PT")?;
                expect_index(line, tokens[1], graph.points.len(), "point")?;
                let v = textio::parse_floats(line, &tokens[2..])?;
                graph.add_point(Vector3::new(v[0], v[1], v[2]));
            }
            "LINE" => {
                textio::expect_len(line, &tokens, 8, "LINE")?;
                expect_index(line, tokens[1], graph.lines.len(), "line")?;
                let v = textio::parse_floats(line, &tokens[2..])?;
                let l = LineLandmark::new(Vector3::new(v[0], v[1], v[2]), Vector3::new(v[3], v[4], v[5]));
                if (l.start - l.end).norm() <= 1e-6 {
                    return Err(ParseError::new(line, "line endpoints coincide"));
                }
                graph.add_line(l);
            }
            "PFACTOR" => {
                textio::expect_len(line, &tokens, 7, "PFACTOR")?;
                let pose = textio::parse_usize(line, tokens[1])?;
                let lm = textio::parse_usize(line, tokens[2])?;
                if pose >= graph.poses.len() || lm >= graph.points.len() {
                    return Err(ParseError::new(line, "factor references an undefined variable"));
                }
                let v = textio::parse_floats(line, &tokens[3..])?;
                if !(v[3] > 0.0) {
                    return Err(ParseError::new(line, "sigma must be positive"));
                }
                graph.add_point_factor(
                    pose,
                    lm,
                    PointObservation {
                        ul: v[0],
                        vl: v[1],
                        ur: v[2],
                        sigma: v[3],
                    },
                );
            }
            "LFACTOR" => {
                textio::expect_len(line, &tokens, 9, "LFACTOR")?;
                let pose = textio::parse_usize(line, tokens[1])?;
                let lm = textio::parse_usize(line, tokens[2])?;
                if pose >= graph.poses.len() || lm >= graph.lines.len() {
                    return Err(ParseError::new(line, "factor references an undefined variable"));
                }
                let v = textio::parse_floats(line, &tokens[3..])?;
                if v[0] == 0.0 && v[1] == 0.0 {
                    return Err(ParseError::new(line, "line normal (lx, ly) is zero"));
                }
                if !(v[5] > 0.0) {
                    return Err(ParseError::new(line, "sigma must be positive"));
                }
                graph.add_line_factor(
                    pose,
                    lm,
                    LineObservation {
                        line: crate::factors::LineCoeffs::new(v[0], v[1], v[2]),
                        u_start_right: v[3],
                        u_end_right: v[4],
                        sigma: v[5],
                    },
                );
            }
            other => return Err(ParseError::new(line, format!("unknown record `{other}`"))),
        }
    }
    if !have_camera {
        return Err(ParseError::new(0, "missing CAMERA record"));
    }
    Ok(graph)
}
