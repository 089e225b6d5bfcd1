//! Reference implementations used as oracles by the integration tests. They
//! favour obviously-correct brute force over speed and share no code paths
//! with the library beyond its data types and residual functions.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, Vector3};
use plslam::eval::Trajectory;
use plslam::factors::{line_residual_stereo, point_residual};
use plslam::feature_grid::ScoredKeypoint;
use plslam::geometry::{Pose, Twist};
use plslam::line_merge::{MergeTolerances, Segment2D};
use plslam::optimizer::FactorGraph;
use std::f64::consts::{PI, TAU};

/// O(n²) greedy suppression: strongest first, accept a point when its cell
/// holds fewer than `quota` accepted points and no accepted point lies within
/// Chebyshev distance `radius`. Returns input indices in acceptance order.
pub fn greedy_suppress(
    points: &[ScoredKeypoint],
    width: u32,
    height: u32,
    cell: f64,
    radius: f64,
    quota: usize,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (p, q) = (&points[a], &points[b]);
        q.response
            .partial_cmp(&p.response)
            .unwrap()
            .then(p.y.partial_cmp(&q.y).unwrap())
            .then(p.x.partial_cmp(&q.x).unwrap())
            .then(a.cmp(&b))
    });
    let cells_x = (width as f64 / cell).ceil() as i64;
    let cells_y = (height as f64 / cell).ceil() as i64;
    let cell_of = |p: &ScoredKeypoint| {
        let cx = ((p.x / cell).floor() as i64).clamp(0, cells_x - 1);
        let cy = ((p.y / cell).floor() as i64).clamp(0, cells_y - 1);
        (cx, cy)
    };
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let p = &points[i];
        let c = cell_of(p);
        let in_cell = kept.iter().filter(|&&j| cell_of(&points[j]) == c).count();
        if in_cell >= quota {
            continue;
        }
        let near = kept
            .iter()
            .any(|&j| (points[j].x - p.x).abs().max((points[j].y - p.y).abs()) <= radius);
        if !near {
            kept.push(i);
        }
    }
    kept
}

/// Hough parameters from the unit normal of the segment's supporting line.
pub fn hough_by_normal(s: &Segment2D) -> (f64, f64) {
    let (dx, dy) = (s.x2 - s.x1, s.y2 - s.y1);
    let len = dx.hypot(dy);
    let (nx, ny) = (-dy / len, dx / len);
    let theta = ny.atan2(nx).rem_euclid(TAU);
    (s.x1 * nx + s.y1 * ny, theta)
}

fn wrapped_gap(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

/// Pairwise threshold accepting either Hough representation of `b`.
pub fn pair_matches(a: &Segment2D, b: &Segment2D, tol: &MergeTolerances) -> bool {
    let (ra, ta) = hough_by_normal(a);
    let (rb, tb) = hough_by_normal(b);
    [(rb, tb), (-rb, tb + PI)].iter().any(|&(r, t)| {
        let scale = ra.abs().max(r.abs()).max(tol.rho_floor);
        (ra - r).abs() < tol.rho_fraction * scale && wrapped_gap(ta, t) < tol.theta
    })
}

/// Transitive closure of `pair_matches` over all pairs; clusters sorted by
/// smallest member, members ascending.
pub fn union_find_clusters(segs: &[Segment2D], tol: &MergeTolerances) -> Vec<Vec<usize>> {
    let n = segs.len();
    let mut label: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if pair_matches(&segs[i], &segs[j], tol) {
                let (from, to) = (label[i].max(label[j]), label[i].min(label[j]));
                for l in label.iter_mut() {
                    if *l == from {
                        *l = to;
                    }
                }
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for root in 0..n {
        let members: Vec<usize> = (0..n).filter(|&i| label[i] == root).collect();
        if !members.is_empty() {
            clusters.push(members);
        }
    }
    clusters
}

/// Central-difference Jacobian of `f` at `x`.
pub fn numeric_jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let rows = f(x).len();
    let mut j = DMatrix::zeros(rows, x.len());
    for c in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[c] += h;
        xm[c] -= h;
        j.set_column(c, &((f(&xp) - f(&xm)) / (2.0 * h)));
    }
    j
}

/// Largest entry deviation relative to the reference's largest entry.
pub fn relative_deviation(a: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    (a - reference).amax() / reference.amax().max(1e-12)
}

pub fn twist(v: [f64; 6]) -> Twist {
    Twist::from_column_slice(&v)
}

/// Translation and rotation-angle difference between two poses.
pub fn pose_difference(a: &Pose, b: &Pose) -> (f64, f64) {
    let d = a.compose(&b.inverse());
    let c = ((d.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let s = (d.rotation - d.rotation.transpose()).norm() / (2.0 * 2f64.sqrt());
    ((a.center() - b.center()).norm(), s.atan2(c))
}

/// RMS of camera-centre errors over the listed poses.
pub fn window_ate(graph: &FactorGraph, truth: &[Pose], window: &[usize]) -> f64 {
    let ss: f64 = window
        .iter()
        .map(|&i| (graph.poses[i].pose.center() - truth[i].center()).norm_squared())
        .sum();
    (ss / window.len() as f64).sqrt()
}

fn huber(s: f64, delta: f64) -> f64 {
    if s <= delta * delta {
        s
    } else {
        2.0 * delta * s.sqrt() - delta * delta
    }
}

#[derive(Clone, Copy)]
enum Var {
    Pose(usize),
    Point(usize),
    LineStart(usize),
    LineEnd(usize),
}

fn var_dim(v: Var) -> usize {
    match v {
        Var::Pose(_) => 6,
        _ => 3,
    }
}

fn read_var(g: &FactorGraph, v: Var) -> (Pose, Vector3<f64>) {
    match v {
        Var::Pose(i) => (g.poses[i].pose, Vector3::zeros()),
        Var::Point(i) => (Pose::identity(), g.points[i]),
        Var::LineStart(i) => (Pose::identity(), g.lines[i].start),
        Var::LineEnd(i) => (Pose::identity(), g.lines[i].end),
    }
}

fn write_var(g: &mut FactorGraph, v: Var, value: &(Pose, Vector3<f64>)) {
    match v {
        Var::Pose(i) => g.poses[i].pose = value.0,
        Var::Point(i) => g.points[i] = value.1,
        Var::LineStart(i) => g.lines[i].start = value.1,
        Var::LineEnd(i) => g.lines[i].end = value.1,
    }
}

fn nudge(g: &mut FactorGraph, v: Var, d: &[f64]) {
    match v {
        Var::Pose(i) => g.poses[i].pose = g.poses[i].pose.retract(&Twist::from_column_slice(d)),
        Var::Point(i) => g.points[i] += Vector3::from_column_slice(d),
        Var::LineStart(i) => g.lines[i].start += Vector3::from_column_slice(d),
        Var::LineEnd(i) => g.lines[i].end += Vector3::from_column_slice(d),
    }
}

#[derive(Clone, Copy)]
enum FactorRef {
    Point(usize),
    Line(usize),
}

fn factor_cost(g: &FactorGraph, f: FactorRef) -> f64 {
    match f {
        FactorRef::Point(k) => {
            let f = &g.point_factors[k];
            match point_residual(&g.poses[f.pose].pose, &g.points[f.landmark], &f.obs, &g.camera) {
                Ok(r) => huber(f.information * r.norm_squared(), g.huber_point),
                Err(_) => f64::INFINITY,
            }
        }
        FactorRef::Line(k) => {
            let f = &g.line_factors[k];
            match line_residual_stereo(&g.poses[f.pose].pose, &g.lines[f.landmark], &f.obs, &g.camera) {
                Ok(r) => huber(f.information * r.norm_squared(), g.huber_line),
                Err(_) => f64::INFINITY,
            }
        }
    }
}

fn full_cost(g: &FactorGraph) -> f64 {
    (0..g.point_factors.len())
        .map(|k| factor_cost(g, FactorRef::Point(k)))
        .chain((0..g.line_factors.len()).map(|k| factor_cost(g, FactorRef::Line(k))))
        .sum()
}

/// Outcome of [`gradient_descent_local_ba`].
pub struct DescentResult {
    pub cost: f64,
    pub iterations: usize,
    /// Norm of the last accepted step.
    pub step_norm: f64,
}

/// Slow reference minimizer for local bundle adjustment: first-order descent
/// (Polak-Ribiere conjugate gradients, block-Jacobi preconditioned) with a
/// parabolic line search and Armijo backtracking. Gradient and
/// curvature blocks come from central differences of the robust cost of the
/// factors touching each variable. Window poses and every landmark they
/// observe are free.
pub fn gradient_descent_local_ba(graph: &mut FactorGraph, window: &[usize], max_iterations: usize) -> DescentResult {
    let mut vars: Vec<Var> = window.iter().map(|&i| Var::Pose(i)).collect();
    let mut point_free = vec![false; graph.points.len()];
    let mut line_free = vec![false; graph.lines.len()];
    for f in &graph.point_factors {
        point_free[f.landmark] |= window.contains(&f.pose);
    }
    for f in &graph.line_factors {
        line_free[f.landmark] |= window.contains(&f.pose);
    }
    vars.extend((0..graph.points.len()).filter(|&i| point_free[i]).map(Var::Point));
    for i in (0..graph.lines.len()).filter(|&i| line_free[i]) {
        vars.push(Var::LineStart(i));
        vars.push(Var::LineEnd(i));
    }
    let touching: Vec<Vec<FactorRef>> = vars
        .iter()
        .map(|&v| {
            let mut out = Vec::new();
            for (k, f) in graph.point_factors.iter().enumerate() {
                let hit = match v {
                    Var::Pose(i) => f.pose == i,
                    Var::Point(i) => f.landmark == i,
                    _ => false,
                };
                if hit {
                    out.push(FactorRef::Point(k));
                }
            }
            for (k, f) in graph.line_factors.iter().enumerate() {
                let hit = match v {
                    Var::Pose(i) => f.pose == i,
                    Var::LineStart(i) | Var::LineEnd(i) => f.landmark == i,
                    _ => false,
                };
                if hit {
                    out.push(FactorRef::Line(k));
                }
            }
            out
        })
        .collect();

    let mut current = full_cost(graph);
    let mut iterations = 0;
    let mut step_norm = f64::INFINITY;
    // gradient step and the wider curvature step
    let (h, hh) = (1e-6, 1e-4);
    let mut prev: Option<(Vec<DVector<f64>>, Vec<DVector<f64>>, Vec<DVector<f64>>)> = None;
    while iterations < max_iterations {
        // gradient g and preconditioned gradient z = M⁻¹ g, per block
        let mut grads = Vec::with_capacity(vars.len());
        let mut precond = Vec::with_capacity(vars.len());
        for (&v, factors) in vars.iter().zip(&touching) {
            let n = var_dim(v);
            let saved = read_var(graph, v);
            let local = |g: &mut FactorGraph, d: &[f64]| {
                nudge(g, v, d);
                let c: f64 = factors.iter().map(|&f| factor_cost(g, f)).sum();
                write_var(g, v, &saved);
                c
            };
            let c0 = local(graph, &vec![0.0; n]);
            let mut grad = DVector::zeros(n);
            let mut hess = DMatrix::zeros(n, n);
            for a in 0..n {
                let mut d = vec![0.0; n];
                d[a] = h;
                let fp = local(graph, &d);
                d[a] = -h;
                let fm = local(graph, &d);
                grad[a] = (fp - fm) / (2.0 * h);
                d[a] = hh;
                let fp = local(graph, &d);
                d[a] = -hh;
                let fm = local(graph, &d);
                hess[(a, a)] = (fp - 2.0 * c0 + fm) / (hh * hh);
            }
            for a in 0..n {
                for b in a + 1..n {
                    let mut d = vec![0.0; n];
                    d[a] = hh;
                    d[b] = hh;
                    let fpp = local(graph, &d);
                    d[b] = -hh;
                    let fpm = local(graph, &d);
                    d[a] = -hh;
                    let fmm = local(graph, &d);
                    d[b] = hh;
                    let fmp = local(graph, &d);
                    let x = (fpp - fpm - fmp + fmm) / (4.0 * hh * hh);
                    hess[(a, b)] = x;
                    hess[(b, a)] = x;
                }
            }
            let ridge = 1e-3 * hess.diagonal().amax().max(1e-9);
            let reg = &hess + DMatrix::identity(n, n) * ridge;
            let z = match reg.cholesky() {
                Some(c) => c.solve(&grad),
                None => &grad / hess.diagonal().amax().max(1.0),
            };
            grads.push(grad);
            precond.push(z);
        }
        let dot = |a: &[DVector<f64>], b: &[DVector<f64>]| a.iter().zip(b).map(|(x, y)| x.dot(y)).sum::<f64>();
        // Polak-Ribiere+ direction with automatic restarts
        let mut dir: Vec<DVector<f64>> = precond.iter().map(|z| -z).collect();
        if let Some((g0, z0, d0)) = &prev {
            let num = dot(&grads, &precond) - dot(g0, &precond);
            let beta = (num / dot(g0, z0)).max(0.0);
            for (d, p) in dir.iter_mut().zip(d0) {
                *d += p * beta;
            }
            if dot(&grads, &dir) >= 0.0 {
                dir = precond.iter().map(|z| -z).collect();
            }
        }
        let slope = dot(&grads, &dir);
        let saved: Vec<(Pose, Vector3<f64>)> = vars.iter().map(|&v| read_var(graph, v)).collect();
        let cost_at = |g: &mut FactorGraph, alpha: f64| {
            for (v, s) in vars.iter().zip(&saved) {
                write_var(g, *v, s);
            }
            for (v, d) in vars.iter().zip(&dir) {
                let scaled: Vec<f64> = d.iter().map(|x| x * alpha).collect();
                nudge(g, *v, &scaled);
            }
            full_cost(g)
        };
        // parabolic fit through f(0), f'(0) and a backtracked trial point
        let mut alpha = 1.0;
        let mut trial = cost_at(graph, alpha);
        while !(trial.is_finite()) && alpha > 1e-12 {
            alpha *= 0.5;
            trial = cost_at(graph, alpha);
        }
        let curvature = trial - current - slope * alpha;
        let mut best = (alpha, trial);
        if curvature > 0.0 {
            let a_star = -slope * alpha * alpha / (2.0 * curvature);
            let c = cost_at(graph, a_star);
            if c < best.1 {
                best = (a_star, c);
            }
        }
        while best.1 > current + 1e-4 * best.0 * slope && best.0 > 1e-12 {
            best.0 *= 0.5;
            best.1 = cost_at(graph, best.0);
        }
        iterations += 1;
        if best.1 >= current {
            for (v, s) in vars.iter().zip(&saved) {
                write_var(graph, *v, s);
            }
            break;
        }
        cost_at(graph, best.0);
        step_norm = best.0 * dir.iter().map(|d| d.norm_squared()).sum::<f64>().sqrt();
        let rel = (current - best.1) / current.max(1e-300);
        current = best.1;
        prev = Some((grads, precond, dir));
        if rel < 1e-15 {
            break;
        }
    }
    DescentResult {
        cost: current,
        iterations,
        step_norm,
    }
}

/// Deterministic trajectory on a helix with slowly varying orientation.
pub fn helix_trajectory(n: usize, seed: f64) -> Trajectory {
    let entries = (0..n)
        .map(|k| {
            let t = k as f64 * 0.1;
            let c = Vector3::new((t + seed).cos() * 3.0, 0.2 * t, (t + seed).sin() * 3.0);
            let w = plslam::geometry::so3_exp(&Vector3::new(0.05 * t, t + seed, 0.02 * (seed + t).sin()));
            (t, Pose::new(w, c))
        })
        .collect();
    Trajectory::new(entries).unwrap()
}

/// Local bundle-adjustment problem over consecutive frames of a synthetic
/// circle world. Pose 0 is a fixed anchor and poses `1..=window_len` are
/// free; window poses start from `truth ∘ exp(δ)` with `|δρ| ≤ max_shift`
/// metres and rotation angle up to `max_angle_deg`, free landmarks from
/// truth plus a uniform offset of up to `landmark_shift` per axis.
pub struct LocalBaProblem {
    pub graph: FactorGraph,
    pub truth: Vec<Pose>,
    pub window: Vec<usize>,
}

pub fn local_ba_problem(
    seed: u64,
    sigma: f64,
    n_points: usize,
    n_lines: usize,
    window_len: usize,
    max_shift: f64,
    max_angle_deg: f64,
    landmark_shift: f64,
) -> LocalBaProblem {
    use plslam::simworld::{generate_world, render_frame, WorldConfig};
    use rand::{Rng, SeedableRng};
    let cfg = WorldConfig {
        seed,
        n_points,
        n_lines,
        duration: (window_len + 1) as f64 / 10.0,
        frame_rate: 10.0,
        pixel_noise_sigma: sigma,
        ..WorldConfig::default()
    };
    let world = generate_world(&cfg).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut graph = FactorGraph::new(cfg.camera);
    for p in &world.points {
        let d = Vector3::from_fn(|_, _| rng.random_range(-landmark_shift..=landmark_shift));
        graph.add_point(p + d);
    }
    for l in &world.lines {
        let mut l = *l;
        l.start += Vector3::from_fn(|_, _| rng.random_range(-landmark_shift..=landmark_shift));
        l.end += Vector3::from_fn(|_, _| rng.random_range(-landmark_shift..=landmark_shift));
        graph.add_line(l);
    }
    let mut truth = Vec::new();
    for k in 0..=window_len {
        let frame = render_frame(&world, k);
        let start = if k == 0 {
            frame.truth_pose
        } else {
            let dir = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
            let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0)).normalize();
            let rho = dir * rng.random_range(0.0..=max_shift);
            let phi = axis * rng.random_range(0.0..=max_angle_deg).to_radians();
            frame.truth_pose.retract(&Twist::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z))
        };
        let pi = graph.add_pose(start, k == 0);
        for (id, o) in &frame.point_obs {
            graph.add_point_factor(pi, *id, *o);
        }
        for d in &frame.line_obs {
            graph.add_line_factor(pi, d.landmark, d.obs);
        }
        truth.push(frame.truth_pose);
    }
    LocalBaProblem {
        graph,
        truth,
        window: (1..=window_len).collect(),
    }
}
