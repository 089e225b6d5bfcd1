//! Trajectory association, alignment and error metrics.
//!
//! Trajectory poses are world-from-camera, the convention of the TUM and KITTI
//! file formats.

use crate::geometry::{rotation_angle, Pose};
use crate::textio::{self, ParseError};
use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use std::fmt::Write as _;
use thiserror::Error;

/// Default association tolerance in seconds.
pub const DEFAULT_MAX_DT: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("trajectories share no associated timestamps")]
    NoOverlap,
    #[error("alignment needs at least 3 non-collinear positions")]
    DegenerateGeometry,
    #[error("timestamps must be strictly increasing (entry {index})")]
    NonIncreasingTimestamps { index: usize },
    #[error("need at least {needed} associated poses, found {found}")]
    TooShort { needed: usize, found: usize },
    #[error("format error: {0}")]
    Format(#[from] ParseError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    entries: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(f64, Pose)>) -> Result<Self, EvalError> {
        for (i, w) in entries.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(EvalError::NonIncreasingTimestamps { index: i + 1 });
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(f64, Pose)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.entries.iter().map(|(_, p)| p.translation).collect()
    }

    /// Applies `T` on the left of every pose.
    pub fn transformed(&self, t: &Pose) -> Trajectory {
        Trajectory {
            entries: self.entries.iter().map(|(s, p)| (*s, t.compose(p))).collect(),
        }
    }
}

/// Greedy nearest-timestamp matching: candidate pairs within `max_dt` are
/// taken in order of increasing time difference, using each index once.
/// Pairs are returned sorted by estimate index.
pub fn associate(est: &Trajectory, gt: &Trajectory, max_dt: f64) -> Result<Vec<(usize, usize)>, EvalError> {
    let gt_t: Vec<f64> = gt.entries.iter().map(|e| e.0).collect();
    let mut candidates = Vec::new();
    for (i, (t, _)) in est.entries.iter().enumerate() {
        let lo = gt_t.partition_point(|&g| g < t - max_dt);
        for (j, &g) in gt_t.iter().enumerate().skip(lo) {
            if g > t + max_dt {
                break;
            }
            candidates.push(((g - t).abs(), i, j));
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_e = vec![false; est.len()];
    let mut used_g = vec![false; gt.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_e[i] && !used_g[j] {
            used_e[i] = true;
            used_g[j] = true;
            pairs.push((i, j));
        }
    }
    if pairs.is_empty() {
        return Err(EvalError::NoOverlap);
    }
    pairs.sort_unstable();
    Ok(pairs)
}

/// Similarity transform `x -> scale * R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub pose: Pose,
    pub scale: f64,
}

impl Alignment {
    pub fn identity() -> Self {
        Self {
            pose: Pose::identity(),
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.pose.rotation * p * self.scale + self.pose.translation
    }
}

/// Least-squares alignment mapping `est` positions onto `gt` positions.
pub fn umeyama_align(est: &[Vector3<f64>], gt: &[Vector3<f64>], with_scale: bool) -> Result<Alignment, EvalError> {
    assert_eq!(est.len(), gt.len(), "position lists must pair up");
    let n = est.len();
    if n < 3 {
        return Err(EvalError::DegenerateGeometry);
    }
    let nf = n as f64;
    let mu_e = est.iter().sum::<Vector3<f64>>() / nf;
    let mu_g = gt.iter().sum::<Vector3<f64>>() / nf;
    let mut cov = Matrix3::zeros();
    let mut spread_e = Matrix3::zeros();
    let mut spread_g = Matrix3::zeros();
    let mut var_e = 0.0;
    for (e, g) in est.iter().zip(gt) {
        let de = e - mu_e;
        let dg = g - mu_g;
        cov += dg * de.transpose();
        spread_e += de * de.transpose();
        spread_g += dg * dg.transpose();
        var_e += de.norm_squared();
    }
    cov /= nf;
    var_e /= nf;
    let collinear = |m: &Matrix3<f64>| {
        let mut s: Vec<f64> = m.symmetric_eigenvalues().iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        !(s[0] > 0.0) || s[1] <= 1e-12 * s[0]
    };
    if collinear(&spread_e) || collinear(&spread_g) {
        return Err(EvalError::DegenerateGeometry);
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut d = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * v_t;
    let scale = if with_scale {
        (svd.singular_values.component_mul(&d.diagonal())).sum() / var_e
    } else {
        1.0
    };
    let t = mu_g - r * mu_e * scale;
    Ok(Alignment {
        pose: Pose::new(r, t),
        scale,
    })
}

fn paired_positions(est: &Trajectory, gt: &Trajectory, pairs: &[(usize, usize)]) -> (Vec<Vector3<f64>>, Vec<Vector3<f64>>) {
    pairs
        .iter()
        .map(|&(i, j)| (est.entries[i].1.translation, gt.entries[j].1.translation))
        .unzip()
}

/// Position errors of every associated pair, after optional rigid alignment.
pub fn position_errors(
    est: &Trajectory,
    gt: &Trajectory,
    aligned: bool,
    max_dt: f64,
) -> Result<Vec<(f64, f64)>, EvalError> {
    let pairs = associate(est, gt, max_dt)?;
    let (pe, pg) = paired_positions(est, gt, &pairs);
    let align = if aligned {
        umeyama_align(&pe, &pg, false)?
    } else {
        Alignment::identity()
    };
    Ok(pairs
        .iter()
        .zip(pe.iter().zip(&pg))
        .map(|(&(_, j), (e, g))| (gt.entries[j].0, (align.apply(e) - g).norm()))
        .collect())
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v * v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

pub fn ate_rmse(est: &Trajectory, gt: &Trajectory, aligned: bool) -> Result<f64, EvalError> {
    ate_rmse_with(est, gt, aligned, DEFAULT_MAX_DT)
}

pub fn ate_rmse_with(est: &Trajectory, gt: &Trajectory, aligned: bool, max_dt: f64) -> Result<f64, EvalError> {
    Ok(rms(position_errors(est, gt, aligned, max_dt)?.into_iter().map(|e| e.1)))
}

/// Relative pose error over a gap of `delta` associated poses:
/// `(translation RMSE, rotation RMSE in radians)`.
pub fn rpe_rmse(est: &Trajectory, gt: &Trajectory, delta: usize) -> Result<(f64, f64), EvalError> {
    rpe_rmse_with(est, gt, delta, DEFAULT_MAX_DT)
}

pub fn rpe_rmse_with(est: &Trajectory, gt: &Trajectory, delta: usize, max_dt: f64) -> Result<(f64, f64), EvalError> {
    let pairs = associate(est, gt, max_dt)?;
    if delta == 0 || pairs.len() < delta + 1 {
        return Err(EvalError::TooShort {
            needed: delta.max(1) + 1,
            found: pairs.len(),
        });
    }
    let errs: Vec<Pose> = (0..pairs.len() - delta)
        .map(|k| {
            let (ia, ga) = pairs[k];
            let (ib, gb) = pairs[k + delta];
            let rel_gt = gt.entries[ga].1.inverse().compose(&gt.entries[gb].1);
            let rel_est = est.entries[ia].1.inverse().compose(&est.entries[ib].1);
            rel_gt.inverse().compose(&rel_est)
        })
        .collect();
    Ok((
        rms(errs.iter().map(|e| e.translation.norm())),
        rms(errs.iter().map(|e| rotation_angle(&e.rotation))),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryFormat {
    Tum,
    Kitti,
}

fn rotation_to_quaternion(r: &Matrix3<f64>) -> UnitQuaternion<f64> {
    let mut q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    if q.w < 0.0 {
        q = UnitQuaternion::new_unchecked(-q.into_inner());
    }
    q
}

/// `timestamp tx ty tz qx qy qz qw` per line.
pub fn format_tum(traj: &Trajectory) -> String {
    let mut out = String::new();
    for (t, p) in &traj.entries {
        let q = rotation_to_quaternion(&p.rotation);
        let _ = writeln!(
            out,
            "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            t, p.translation.x, p.translation.y, p.translation.z, q.i, q.j, q.k, q.w
        );
    }
    out
}

/// Twelve row-major `[R | t]` values per line.
pub fn format_kitti(traj: &Trajectory) -> String {
    let mut out = String::new();
    for (_, p) in &traj.entries {
        let r = &p.rotation;
        let t = &p.translation;
        let v = [
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
        ];
        let line: Vec<String> = v.iter().map(|x| format!("{:.9e}", x)).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

/// Parses a TUM or KITTI trajectory, chosen by the column count of the first
/// record. KITTI frames get their index as timestamp.
pub fn parse_trajectory(text: &str) -> Result<(Trajectory, TrajectoryFormat), EvalError> {
    let mut format = None;
    let mut entries = Vec::new();
    for (line, tokens) in textio::records(text) {
        let f = match (format, tokens.len()) {
            (None, 8) | (Some(TrajectoryFormat::Tum), 8) => TrajectoryFormat::Tum,
            (None, 12) | (Some(TrajectoryFormat::Kitti), 12) => TrajectoryFormat::Kitti,
            (None, n) => {
                return Err(ParseError::new(line, format!("expected 8 (TUM) or 12 (KITTI) columns, found {n}")).into())
            }
            (Some(_), n) => return Err(ParseError::new(line, format!("inconsistent column count {n}")).into()),
        };
        format = Some(f);
        let v = textio::parse_floats(line, &tokens)?;
        let entry = match f {
            TrajectoryFormat::Tum => {
                let q = Quaternion::new(v[7], v[4], v[5], v[6]);
                if (q.norm() - 1.0).abs() > 1e-3 {
                    return Err(ParseError::new(line, "quaternion is not unit length").into());
                }
                let r = UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner();
                (v[0], Pose::new(r, Vector3::new(v[1], v[2], v[3])))
            }
            TrajectoryFormat::Kitti => {
                let pose = crate::optimizer::pose_from_row_major(&v);
                if pose.orthonormality_error() > 1e-4 {
                    return Err(ParseError::new(line, "rotation is not orthonormal").into());
                }
                (entries.len() as f64, pose.normalized())
            }
        };
        if let Some((prev, _)) = entries.last() {
            if !(entry.0 > *prev) {
                return Err(ParseError::new(line, "timestamps must be strictly increasing").into());
            }
        }
        entries.push(entry);
    }
    let format = format.ok_or_else(|| EvalError::Format(ParseError::new(0, "trajectory file is empty")))?;
    Ok((Trajectory { entries }, format))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub pairs: usize,
    pub aligned: bool,
    pub ate_rmse: f64,
    pub rpe_delta: usize,
    pub rpe_trans: f64,
    pub rpe_rot: f64,
    /// `(gt timestamp, position error)` per associated pose.
    pub errors: Vec<(f64, f64)>,
}

pub fn evaluate(est: &Trajectory, gt: &Trajectory, aligned: bool, rpe_delta: usize, max_dt: f64) -> Result<MetricReport, EvalError> {
    let errors = position_errors(est, gt, aligned, max_dt)?;
    let (rpe_trans, rpe_rot) = rpe_rmse_with(est, gt, rpe_delta, max_dt)?;
    Ok(MetricReport {
        pairs: errors.len(),
        aligned,
        ate_rmse: rms(errors.iter().map(|e| e.1)),
        rpe_delta,
        rpe_trans,
        rpe_rot,
        errors,
    })
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        format!(
            "pairs,aligned,ate_rmse_m,rpe_delta,rpe_trans_m,rpe_rot_rad\n{},{},{:.9},{},{:.9},{:.9}\n",
            self.pairs,
            u8::from(self.aligned),
            self.ate_rmse,
            self.rpe_delta,
            self.rpe_trans,
            self.rpe_rot
        )
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<22}{:>14}", "metric", "value");
        let _ = writeln!(out, "{:<22}{:>14}", "associated poses", self.pairs);
        let _ = writeln!(out, "{:<22}{:>14}", "aligned", if self.aligned { "yes" } else { "no" });
        let _ = writeln!(out, "{:<22}{:>14.6}", "ATE RMSE (m)", self.ate_rmse);
        let _ = writeln!(out, "{:<22}{:>14.6}", format!("RPE trans d={} (m)", self.rpe_delta), self.rpe_trans);
        let _ = writeln!(
            out,
            "{:<22}{:>14.6}",
            format!("RPE rot d={} (deg)", self.rpe_delta),
            self.rpe_rot.to_degrees()
        );
        out
    }

    /// Position error over time as a standalone SVG line plot.
    pub fn to_svg(&self) -> String {
        let (w, h, m) = (640.0, 240.0, 40.0);
        let t0 = self.errors.first().map_or(0.0, |e| e.0);
        let t1 = self.errors.last().map_or(1.0, |e| e.0).max(t0 + 1e-9);
        let emax = self.errors.iter().map(|e| e.1).fold(0.0, f64::max).max(1e-12);
        let sx = |t: f64| m + (t - t0) / (t1 - t0) * (w - 2.0 * m);
        let sy = |e: f64| h - m - e / emax * (h - 2.0 * m);
        let pts: Vec<String> = self
            .errors
            .iter()
            .map(|&(t, e)| format!("{:.2},{:.2}", sx(t), sy(e)))
            .collect();
        let mut out = String::new();
        let _ = writeln!(out, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
        let _ = writeln!(out, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(
            out,
            r#"<path d="M{m} {m} V{y} H{x}" stroke="black" fill="none"/>"#,
            y = h - m,
            x = w - m
        );
        let _ = writeln!(out, r#"<polyline points="{}" stroke="steelblue" fill="none"/>"#, pts.join(" "));
        let _ = writeln!(out, r#"<text x="{m}" y="{}" font-size="12">max {emax:.4} m</text>"#, m - 8.0);
        let _ = writeln!(out, r#"<text x="{}" y="{}" font-size="12">t [s]</text>"#, w - m - 30.0, h - 10.0);
        out.push_str("</svg>\n");
        out
    }
}
