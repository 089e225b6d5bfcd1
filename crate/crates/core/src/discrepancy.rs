//! Audits of closed forms against independent numerical references.
//!
//! The Jacobian audit compares the analytic point and line Jacobians, and the
//! literal transcriptions of the line Jacobian entries, with central finite
//! differences. The grid audit compares the closed-form cell side with a
//! bisection solve of the row/column count relation.

use crate::factors::{
    line_endpoint_residual, line_jacobian_camera_with, line_jacobian_pose_with, line_jacobians,
    line_residual_stereo, line_residual_stereo_with, line_through_pixels, point_jacobians, point_residual,
    LineCoeffs, LineLandmark, LineModel, LineObservation, PointObservation,
};
use crate::feature_grid::{cell_side_by_bisection, compute_grid_spec, GridError};
use crate::geometry::{se3_exp, Pose, StereoCamera, Twist};
use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;

const FD_STEP: f64 = 1e-6;
/// Entries deviating from finite differences by more than this fraction of
/// the matrix scale count as mismatches.
pub const ENTRY_TOLERANCE: f64 = 1e-4;

/// Largest entry deviation divided by the largest reference entry.
pub fn relative_error(analytic: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    let scale = reference.amax().max(1e-12);
    (analytic - reference).amax() / scale
}

fn central_difference<F>(rows: usize, cols: usize, mut f: F) -> DMatrix<f64>
where
    F: FnMut(usize, f64) -> nalgebra::DVector<f64>,
{
    let mut m = DMatrix::zeros(rows, cols);
    for c in 0..cols {
        let d = (f(c, FD_STEP) - f(c, -FD_STEP)) / (2.0 * FD_STEP);
        m.set_column(c, &d);
    }
    m
}

fn dm<const R: usize, const C: usize>(m: &nalgebra::SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

fn dv(v: &[f64]) -> nalgebra::DVector<f64> {
    nalgebra::DVector::from_column_slice(v)
}

/// One sampled well-conditioned configuration.
#[derive(Debug, Clone)]
pub struct AuditSample {
    pub pose: Pose,
    pub point: Vector3<f64>,
    pub point_obs: PointObservation,
    pub line: LineLandmark,
    pub line_obs: LineObservation,
}

pub fn sample_configuration(rng: &mut ChaCha8Rng, cam: &StereoCamera) -> AuditSample {
    let pose = se3_exp(&Twist::from_fn(|i, _| {
        if i < 3 {
            rng.random_range(-2.0..2.0)
        } else {
            rng.random_range(-0.6..0.6)
        }
    }));
    let inv = pose.inverse();
    let in_view = |rng: &mut ChaCha8Rng| {
        let z: f64 = rng.random_range(2.0..10.0);
        Vector3::new(rng.random_range(-0.5..0.5) * z, rng.random_range(-0.4..0.4) * z, z)
    };
    let point = inv.transform_point(&in_view(rng));
    let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-3.0..3.0);
    let proj = cam.project_stereo(&pose.transform_point(&point)).expect("in front");
    let point_obs = PointObservation {
        ul: proj.ul + jitter(rng),
        vl: proj.vl + jitter(rng),
        ur: proj.ur + jitter(rng),
        sigma: 1.0,
    };
    let (a, b) = loop {
        let a = in_view(rng);
        let b = in_view(rng);
        if (a - b).norm() > 0.5 {
            break (a, b);
        }
    };
    let line = LineLandmark::new(inv.transform_point(&a), inv.transform_point(&b));
    let pa = cam.project_stereo(&a).expect("in front");
    let pb = cam.project_stereo(&b).expect("in front");
    let coeffs = line_through_pixels(pa.ul + jitter(rng), pa.vl + jitter(rng), pb.ul + jitter(rng), pb.vl + jitter(rng))
        .unwrap_or(LineCoeffs::new(0.6, 0.8, -300.0));
    let line_obs = LineObservation {
        line: coeffs,
        u_start_right: pa.ur + jitter(rng),
        u_end_right: pb.ur + jitter(rng),
        sigma: 1.0,
    };
    AuditSample {
        pose,
        point,
        point_obs,
        line,
        line_obs,
    }
}

/// Analytic Jacobian errors of one sample: point pose, point landmark, line
/// pose, line start, line end.
pub fn analytic_errors(s: &AuditSample, cam: &StereoCamera) -> [f64; 5] {
    let (jp, jl) = point_jacobians(&s.pose, &s.point, cam).expect("valid sample");
    let fd_pp = central_difference(3, 6, |c, h| {
        let mut xi = Twist::zeros();
        xi[c] = h;
        dv(point_residual(&s.pose.retract(&xi), &s.point, &s.point_obs, cam).unwrap().as_slice())
    });
    let fd_pl = central_difference(3, 3, |c, h| {
        let mut p = s.point;
        p[c] += h;
        dv(point_residual(&s.pose, &p, &s.point_obs, cam).unwrap().as_slice())
    });
    let (lp, ls, le) = line_jacobians(&s.pose, &s.line, &s.line_obs, cam).expect("valid sample");
    let fd_lp = central_difference(2, 6, |c, h| {
        let mut xi = Twist::zeros();
        xi[c] = h;
        dv(line_residual_stereo(&s.pose.retract(&xi), &s.line, &s.line_obs, cam)
            .unwrap()
            .as_slice())
    });
    let fd_end = |which: usize| {
        central_difference(2, 3, |c, h| {
            let mut l = s.line;
            if which == 0 {
                l.start[c] += h;
            } else {
                l.end[c] += h;
            }
            dv(line_residual_stereo(&s.pose, &l, &s.line_obs, cam).unwrap().as_slice())
        })
    };
    [
        relative_error(&dm(&jp), &fd_pp),
        relative_error(&dm(&jl), &fd_pl),
        relative_error(&dm(&lp), &fd_lp),
        relative_error(&dm(&ls), &fd_end(0)),
        relative_error(&dm(&le), &fd_end(1)),
    ]
}

/// Finite-difference references for one endpoint: derivative of the two
/// residual rows with respect to the camera-frame point (2×3) and the pose
/// twist (2×6).
fn endpoint_references(pc: &Vector3<f64>, l: &LineCoeffs, u_right: f64, cam: &StereoCamera) -> (DMatrix<f64>, DMatrix<f64>) {
    let r = |p: &Vector3<f64>| {
        dv(line_endpoint_residual(p, l, u_right, cam, LineModel::Consistent)
            .unwrap()
            .as_slice())
    };
    let d_cam = central_difference(2, 3, |c, h| {
        let mut p = *pc;
        p[c] += h;
        r(&p)
    });
    let d_pose = central_difference(2, 6, |c, h| {
        let mut xi = Twist::zeros();
        xi[c] = h;
        r(&se3_exp(&xi).transform_point(pc))
    });
    (d_cam, d_pose)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntryMismatch {
    pub matrix: &'static str,
    pub row: usize,
    pub col: usize,
    /// Configurations in which the entry failed the tolerance.
    pub failures: usize,
    /// Largest deviation relative to the matrix scale.
    pub worst: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianAudit {
    pub configurations: usize,
    pub seed: u64,
    /// Worst relative error of each analytic Jacobian, in the order of
    /// `ANALYTIC_NAMES`.
    pub analytic_max: [f64; 5],
    pub mismatches: Vec<EntryMismatch>,
    /// Configurations where the literal residual's left row differs from the
    /// consistent one by more than 1e-9 px.
    pub literal_residual_differs: usize,
}

pub const ANALYTIC_NAMES: [&str; 5] = [
    "point residual / pose",
    "point residual / landmark",
    "line residual / pose",
    "line residual / start endpoint",
    "line residual / end endpoint",
];

impl JacobianAudit {
    pub fn analytic_ok(&self, tolerance: f64) -> bool {
        self.analytic_max.iter().all(|&e| e < tolerance)
    }
}

pub fn audit_jacobians(configurations: usize, seed: u64, cam: &StereoCamera) -> JacobianAudit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut analytic_max = [0.0f64; 5];
    // failures and worst deviation for the 2×3 camera entries and 2×6 pose entries
    let mut cam_stats = [[(0usize, 0.0f64); 3]; 2];
    let mut pose_stats = [[(0usize, 0.0f64); 6]; 2];
    let mut literal_residual_differs = 0;
    for _ in 0..configurations {
        let s = sample_configuration(&mut rng, cam);
        for (m, e) in analytic_max.iter_mut().zip(analytic_errors(&s, cam)) {
            *m = m.max(e);
        }
        let l = &s.line_obs.line;
        for (end, u_right) in [(s.line.start, s.line_obs.u_start_right), (s.line.end, s.line_obs.u_end_right)] {
            let pc = s.pose.transform_point(&end);
            let (d_cam, d_pose) = endpoint_references(&pc, l, u_right, cam);
            let lit_cam = line_jacobian_camera_with(&pc, l, cam, LineModel::Literal).unwrap();
            let lit_pose = line_jacobian_pose_with(&pc, l, cam, LineModel::Literal).unwrap();
            let (sc, sp) = (d_cam.amax().max(1e-12), d_pose.amax().max(1e-12));
            for r in 0..2 {
                for c in 0..3 {
                    let dev = (lit_cam[(r, c)] - d_cam[(r, c)]).abs() / sc;
                    let st = &mut cam_stats[r][c];
                    st.1 = st.1.max(dev);
                    st.0 += usize::from(dev > ENTRY_TOLERANCE);
                }
                for c in 0..6 {
                    let dev = (lit_pose[(r, c)] - d_pose[(r, c)]).abs() / sp;
                    let st = &mut pose_stats[r][c];
                    st.1 = st.1.max(dev);
                    st.0 += usize::from(dev > ENTRY_TOLERANCE);
                }
            }
        }
        let lit = line_residual_stereo_with(&s.pose, &s.line, &s.line_obs, cam, LineModel::Literal).unwrap();
        let con = line_residual_stereo(&s.pose, &s.line, &s.line_obs, cam).unwrap();
        literal_residual_differs += usize::from((lit[0] - con[0]).abs() > 1e-9);
    }
    let mut mismatches = Vec::new();
    for r in 0..2 {
        for c in 0..3 {
            let (failures, worst) = cam_stats[r][c];
            if failures > 0 {
                mismatches.push(EntryMismatch {
                    matrix: "endpoint camera-frame Jacobian",
                    row: r,
                    col: c,
                    failures,
                    worst,
                });
            }
        }
    }
    for r in 0..2 {
        for c in 0..6 {
            let (failures, worst) = pose_stats[r][c];
            if failures > 0 {
                mismatches.push(EntryMismatch {
                    matrix: "endpoint pose Jacobian",
                    row: r,
                    col: c,
                    failures,
                    worst,
                });
            }
        }
    }
    JacobianAudit {
        configurations,
        seed,
        analytic_max,
        mismatches,
        literal_residual_differs,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridAudit {
    pub width: u32,
    pub height: u32,
    pub target: usize,
    pub closed_form: f64,
    pub bisection: Option<f64>,
    pub cell: f64,
    pub cols: usize,
    pub rows: usize,
}

impl GridAudit {
    /// Relative gap between the closed form and the bisection root.
    pub fn relative_gap(&self) -> Option<f64> {
        self.bisection.map(|b| (self.closed_form - b).abs() / b)
    }
}

pub fn audit_grid(width: u32, height: u32, target: usize) -> Result<GridAudit, GridError> {
    let spec = compute_grid_spec(width, height, target)?;
    Ok(GridAudit {
        width,
        height,
        target,
        closed_form: spec.cell_unclamped,
        bisection: cell_side_by_bisection(width as f64, height as f64, target),
        cell: spec.cell,
        cols: spec.cols,
        rows: spec.rows,
    })
}

pub fn format_report(jac: &JacobianAudit, grids: &[GridAudit]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# jacobian audit: {} configurations, seed {}", jac.configurations, jac.seed);
    let _ = writeln!(out, "# analytic jacobians vs central differences (max relative error)");
    for (name, e) in ANALYTIC_NAMES.iter().zip(jac.analytic_max) {
        let _ = writeln!(out, "{name:<32} {e:.3e}");
    }
    let _ = writeln!(out, "# literal line jacobian entries vs central differences");
    if jac.mismatches.is_empty() {
        let _ = writeln!(out, "no mismatching entries");
    }
    for m in &jac.mismatches {
        let _ = writeln!(
            out,
            "{} ({}, {}): mismatch in {}/{} endpoint evaluations, worst deviation {:.3e}",
            m.matrix,
            m.row,
            m.col,
            m.failures,
            2 * jac.configurations,
            m.worst
        );
    }
    let _ = writeln!(
        out,
        "literal left residual row (no principal point) differs in {}/{} configurations",
        jac.literal_residual_differs, jac.configurations
    );
    let _ = writeln!(out, "# grid cell side: closed form vs bisection on the row/column count");
    for g in grids {
        let bis = g.bisection.map_or("none".to_string(), |b| format!("{b:.4}"));
        let gap = g.relative_gap().map_or("n/a".to_string(), |r| format!("{:.2}%", 100.0 * r));
        let _ = writeln!(
            out,
            "{}x{} N={}: closed form {:.4} px, bisection {} px, gap {}, used cell {:.4} px, grid {}x{}",
            g.width, g.height, g.target, g.closed_form, bis, gap, g.cell, g.cols, g.rows
        );
    }
    out
}
