//! Stereo point and line reprojection residuals with analytic Jacobians.
//!
//! A line landmark is a pair of 3D endpoints. Its observation is the left-image
//! line `l` (homogeneous pixel coefficients) plus the right-image columns of the
//! two endpoints. The residual is two-dimensional: the summed signed distances
//! of the projected endpoints to `l` in the left image, and the same sum with
//! each endpoint's column taken from the right observation shifted by `bf / z`.
//!
//! Pose Jacobians use the left perturbation `T' = exp(xi) T` with `xi = (rho, phi)`,
//! so `d(Pc)/d(xi) = [I | -[Pc]x]`.

use crate::geometry::{skew, GeometryError, Pose, StereoCamera, Z_MIN};
use nalgebra::{Matrix2x6, Matrix3, Matrix3x6, SMatrix, Vector2, Vector3};
use thiserror::Error;

pub type Matrix2x3 = SMatrix<f64, 2, 3>;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum FactorError {
    #[error("line endpoints are parallel in homogeneous coordinates")]
    DegenerateEndpoints,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Homogeneous 2D line `lx*u + ly*v + lz = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineCoeffs {
    pub lx: f64,
    pub ly: f64,
    pub lz: f64,
}

impl LineCoeffs {
    pub fn new(lx: f64, ly: f64, lz: f64) -> Self {
        Self { lx, ly, lz }
    }

    pub fn normal_norm(&self) -> f64 {
        self.lx.hypot(self.ly)
    }

    /// Signed distance from pixel `(u, v)` to the line.
    pub fn distance(&self, u: f64, v: f64) -> f64 {
        (self.lx * u + self.ly * v + self.lz) / self.normal_norm()
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.lx, self.ly, self.lz)
    }
}

/// 3D point landmark in world coordinates.
pub type PointLandmark = Vector3<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineLandmark {
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
}

impl LineLandmark {
    pub fn new(start: Vector3<f64>, end: Vector3<f64>) -> Self {
        Self { start, end }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointObservation {
    pub ul: f64,
    pub vl: f64,
    pub ur: f64,
    pub sigma: f64,
}

impl PointObservation {
    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.ul, self.vl, self.ur)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineObservation {
    pub line: LineCoeffs,
    /// Right-image column of the start endpoint.
    pub u_start_right: f64,
    /// Right-image column of the end endpoint.
    pub u_end_right: f64,
    pub sigma: f64,
}

/// Which closed form to evaluate for the line residual and Jacobians.
///
/// `Consistent` adds the principal point to every projected coordinate and is
/// the form the optimizer uses. `Literal` reproduces the closed-form entries
/// exactly as originally written (left rows without the principal point and
/// the Jacobian entries character for character); it exists only so the
/// discrepancy report can compare it against finite differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LineModel {
    #[default]
    Consistent,
    Literal,
}

pub fn line_coefficients(ps: &Vector3<f64>, pe: &Vector3<f64>) -> Result<LineCoeffs, FactorError> {
    let c = ps.cross(pe);
    if c.norm() <= 1e-12 * (1.0 + ps.norm() * pe.norm()) || c.x.hypot(c.y) == 0.0 {
        return Err(FactorError::DegenerateEndpoints);
    }
    let l = c / (ps.norm() * pe.norm());
    Ok(LineCoeffs::new(l.x, l.y, l.z))
}

/// Line through two pixel positions.
pub fn line_through_pixels(u1: f64, v1: f64, u2: f64, v2: f64) -> Result<LineCoeffs, FactorError> {
    line_coefficients(&Vector3::new(u1, v1, 1.0), &Vector3::new(u2, v2, 1.0))
}

fn check_depth(z: f64) -> Result<(), GeometryError> {
    if z > Z_MIN {
        Ok(())
    } else {
        Err(GeometryError::DepthTooSmall { z })
    }
}

pub fn point_residual(
    pose: &Pose,
    point: &PointLandmark,
    obs: &PointObservation,
    cam: &StereoCamera,
) -> Result<Vector3<f64>, FactorError> {
    let pc = pose.transform_point(point);
    let proj = cam.project_stereo(&pc)?;
    Ok(obs.as_vector() - proj.as_vector())
}

/// Jacobians of the point residual with respect to the pose twist (3×6) and
/// the world point (3×3).
pub fn point_jacobians(
    pose: &Pose,
    point: &PointLandmark,
    cam: &StereoCamera,
) -> Result<(Matrix3x6<f64>, Matrix3<f64>), FactorError> {
    let pc = pose.transform_point(point);
    check_depth(pc.z)?;
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    // derivative of the projection, negated because residual = obs - proj
    let dproj = Matrix3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * x * iz2,
        0.0,
        cam.fy * iz,
        -cam.fy * y * iz2,
        cam.fx * iz,
        0.0,
        -(cam.fx * x - cam.bf) * iz2,
    );
    let de_dpc = -dproj;
    let mut dpc_dxi = Matrix3x6::zeros();
    dpc_dxi.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    dpc_dxi.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&pc)));
    Ok((de_dpc * dpc_dxi, de_dpc * pose.rotation))
}

/// Contribution of one camera-frame endpoint to the two residual rows.
/// `u_right` is that endpoint's observed right-image column.
pub fn line_endpoint_residual(
    pc: &Vector3<f64>,
    l: &LineCoeffs,
    u_right: f64,
    cam: &StereoCamera,
    model: LineModel,
) -> Result<Vector2<f64>, FactorError> {
    check_depth(pc.z)?;
    let s = l.normal_norm();
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let v = cam.fy * y / z + cam.cy;
    let left = match model {
        LineModel::Consistent => l.lx * (cam.fx * x / z + cam.cx) + l.ly * v + l.lz,
        LineModel::Literal => l.lx * cam.fx * x / z + l.ly * cam.fy * y / z + l.lz,
    };
    let right = l.lx * (u_right + cam.bf / z) + l.ly * v + l.lz;
    Ok(Vector2::new(left / s, right / s))
}

pub fn line_residual_stereo(
    pose: &Pose,
    line: &LineLandmark,
    obs: &LineObservation,
    cam: &StereoCamera,
) -> Result<Vector2<f64>, FactorError> {
    line_residual_stereo_with(pose, line, obs, cam, LineModel::Consistent)
}

pub fn line_residual_stereo_with(
    pose: &Pose,
    line: &LineLandmark,
    obs: &LineObservation,
    cam: &StereoCamera,
    model: LineModel,
) -> Result<Vector2<f64>, FactorError> {
    let ps = pose.transform_point(&line.start);
    let pe = pose.transform_point(&line.end);
    Ok(line_endpoint_residual(&ps, &obs.line, obs.u_start_right, cam, model)?
        + line_endpoint_residual(&pe, &obs.line, obs.u_end_right, cam, model)?)
}

/// Derivative of one endpoint's residual rows with respect to the
/// camera-frame endpoint. The third row is identically zero.
pub fn line_jacobian_camera(pc: &Vector3<f64>, l: &LineCoeffs, cam: &StereoCamera) -> Result<Matrix3<f64>, FactorError> {
    line_jacobian_camera_with(pc, l, cam, LineModel::Consistent)
}

pub fn line_jacobian_camera_with(
    pc: &Vector3<f64>,
    l: &LineCoeffs,
    cam: &StereoCamera,
    model: LineModel,
) -> Result<Matrix3<f64>, FactorError> {
    check_depth(pc.z)?;
    let s = l.normal_norm();
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let (fx, fy, bf) = (cam.fx, cam.fy, cam.bf);
    let (lx, ly) = (l.lx, l.ly);
    let z2 = z * z;
    let d02 = match model {
        LineModel::Consistent => -(x * fx * lx + y * fy * ly) / (z2 * s),
        LineModel::Literal => -(x * fy * ly + y * fy * ly) / (z2 * s),
    };
    Ok(Matrix3::new(
        fx * lx / (z * s),
        fy * ly / (z * s),
        d02,
        0.0,
        fy * ly / (z * s),
        -(bf * lx + y * fy * ly) / (z2 * s),
        0.0,
        0.0,
        0.0,
    ))
}

pub fn line_jacobian_landmark(
    pose: &Pose,
    pc: &Vector3<f64>,
    l: &LineCoeffs,
    cam: &StereoCamera,
) -> Result<Matrix3<f64>, FactorError> {
    Ok(line_jacobian_camera(pc, l, cam)? * pose.rotation)
}

/// Derivative of one endpoint's residual rows with respect to the pose
/// twist `(t_x, t_y, t_z, phi_x, phi_y, phi_z)`. `pose` is unused by the
/// left-perturbation form and kept for signature symmetry with the landmark
/// Jacobian.
pub fn line_jacobian_pose(
    _pose: &Pose,
    pc: &Vector3<f64>,
    l: &LineCoeffs,
    cam: &StereoCamera,
) -> Result<Matrix3x6<f64>, FactorError> {
    line_jacobian_pose_with(pc, l, cam, LineModel::Consistent)
}

pub fn line_jacobian_pose_with(
    pc: &Vector3<f64>,
    l: &LineCoeffs,
    cam: &StereoCamera,
    model: LineModel,
) -> Result<Matrix3x6<f64>, FactorError> {
    match model {
        LineModel::Consistent => {
            let j = line_jacobian_camera(pc, l, cam)?;
            let mut dpc = Matrix3x6::zeros();
            dpc.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
            dpc.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(pc)));
            Ok(j * dpc)
        }
        LineModel::Literal => {
            check_depth(pc.z)?;
            let s = l.normal_norm();
            let (x, y, z) = (pc.x, pc.y, pc.z);
            let (fx, fy, bf) = (cam.fx, cam.fy, cam.bf);
            let (lx, ly) = (l.lx, l.ly);
            let z2 = z * z;
            let mut j = Matrix3x6::zeros();
            j[(0, 0)] = fx * lx / (z * s);
            j[(0, 1)] = fy * ly / (z * s);
            j[(0, 2)] = -(fx * lx + fy * ly * y) / (z2 * s);
            j[(0, 3)] = -(fx * lx * y - fy * ly * y * y) / (z2 * s) - fy * ly / s;
            j[(0, 4)] = (x * fx * lx + fy * ly * x * y) / (z2 * s) + fx * lx / s;
            j[(0, 5)] = (fy * ly * x - fx * lx * y) / (z * s);
            j[(1, 1)] = fy * ly / (z * s);
            j[(1, 2)] = -(bf * lx - fy * ly * y) / (z2 * s);
            j[(1, 3)] = -(y * bf * lx + fy * ly * y * y) / (z2 * s) - fy * ly / s;
            j[(1, 4)] = (x * bf * lx + fy * ly * x * y) / (z2 * s);
            j[(1, 5)] = fy * ly * x / (z * s);
            Ok(j)
        }
    }
}

/// Full line-factor Jacobians: pose (2×6) and the two endpoints (2×3 each),
/// obtained by summing the per-endpoint blocks.
pub fn line_jacobians(
    pose: &Pose,
    line: &LineLandmark,
    obs: &LineObservation,
    cam: &StereoCamera,
) -> Result<(Matrix2x6<f64>, Matrix2x3, Matrix2x3), FactorError> {
    let ps = pose.transform_point(&line.start);
    let pe = pose.transform_point(&line.end);
    let jp = line_jacobian_pose(pose, &ps, &obs.line, cam)? + line_jacobian_pose(pose, &pe, &obs.line, cam)?;
    let js = line_jacobian_landmark(pose, &ps, &obs.line, cam)?;
    let je = line_jacobian_landmark(pose, &pe, &obs.line, cam)?;
    Ok((
        jp.fixed_rows::<2>(0).into_owned(),
        js.fixed_rows::<2>(0).into_owned(),
        je.fixed_rows::<2>(0).into_owned(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project_stereo, se3_exp, Twist};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> StereoCamera {
        StereoCamera::vga()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        se3_exp(&Twist::from_fn(|i, _| {
            if i < 3 {
                rng.random_range(-1.0..1.0)
            } else {
                rng.random_range(-0.5..0.5)
            }
        }))
    }

    /// World point whose camera-frame depth lies in [0.5, 50].
    fn random_point_in_view(rng: &mut ChaCha8Rng, pose: &Pose) -> Vector3<f64> {
        let z = rng.random_range(0.5..50.0);
        let pc = Vector3::new(rng.random_range(-0.5..0.5) * z, rng.random_range(-0.4..0.4) * z, z);
        pose.inverse().transform_point(&pc)
    }

    fn close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()) + abs
    }

    #[test]
    fn line_coefficients_examples() {
        let ps = Vector3::new(1.0, 0.0, 1.0);
        let pe = Vector3::new(0.0, 1.0, 1.0);
        let l = line_coefficients(&ps, &pe).unwrap();
        assert!((l.as_vector() - Vector3::new(-0.5, -0.5, 0.5)).norm() < 1e-15);
        assert!(l.as_vector().dot(&ps).abs() < 1e-15 && l.as_vector().dot(&pe).abs() < 1e-15);

        let l = line_coefficients(&Vector3::new(0.0, 0.0, 1.0), &Vector3::new(1.0, 0.0, 1.0)).unwrap();
        assert!(l.lx.abs() < 1e-15 && l.lz.abs() < 1e-15 && l.ly > 0.0);

        assert_eq!(line_coefficients(&ps, &ps), Err(FactorError::DegenerateEndpoints));
        let swapped = line_coefficients(&pe, &ps).unwrap();
        assert_eq!(swapped.as_vector(), -line_coefficients(&ps, &pe).unwrap().as_vector());
    }

    #[test]
    fn point_residual_examples() {
        let c = cam();
        let p = Vector3::new(0.0, 0.0, 1.0);
        let proj = project_stereo(&c, &p).unwrap();
        let obs = PointObservation {
            ul: proj.ul,
            vl: proj.vl,
            ur: proj.ur,
            sigma: 1.0,
        };
        assert_eq!(point_residual(&Pose::identity(), &p, &obs, &c).unwrap(), Vector3::zeros());
        let shifted = PointObservation { ul: obs.ul + 1.0, ..obs };
        assert_eq!(
            point_residual(&Pose::identity(), &p, &shifted, &c).unwrap(),
            Vector3::new(1.0, 0.0, 0.0)
        );
        let behind = Vector3::new(0.0, 0.0, -1.0);
        assert!(matches!(
            point_residual(&Pose::identity(), &behind, &obs, &c),
            Err(FactorError::Geometry(_))
        ));
    }

    #[test]
    fn point_residual_matches_homogeneous_pipeline() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = cam();
        let k = nalgebra::Matrix3x4::new(c.fx, 0.0, c.cx, 0.0, 0.0, c.fy, c.cy, 0.0, 0.0, 0.0, 1.0, 0.0);
        for _ in 0..200 {
            let pose = random_pose(&mut rng);
            let pw = random_point_in_view(&mut rng, &pose);
            let obs = PointObservation {
                ul: rng.random_range(0.0..640.0),
                vl: rng.random_range(0.0..480.0),
                ur: rng.random_range(0.0..640.0),
                sigma: 1.0,
            };
            let h = k * pose.to_homogeneous() * pw.push(1.0);
            let (u, v) = (h.x / h.z, h.y / h.z);
            let ur = u - c.bf / h.z;
            let r = point_residual(&pose, &pw, &obs, &c).unwrap();
            let expect = Vector3::new(obs.ul - u, obs.vl - v, obs.ur - ur);
            assert!((r - expect).norm() < 1e-9);
        }
    }

    #[test]
    fn point_jacobian_on_axis_entries() {
        let c = cam();
        let (jp, jl) = point_jacobians(&Pose::identity(), &Vector3::new(0.0, 0.0, 2.0), &c).unwrap();
        assert_eq!(jp[(0, 0)], -c.fx / 2.0);
        // duR/dz = -(fx x - bf)/z² → residual derivative -(bf)/z² at x = 0
        assert_eq!(jl[(2, 2)], -(c.bf) / 4.0);
    }

    fn exact_line_obs(pose: &Pose, line: &LineLandmark, c: &StereoCamera) -> LineObservation {
        let ps = project_stereo(c, &pose.transform_point(&line.start)).unwrap();
        let pe = project_stereo(c, &pose.transform_point(&line.end)).unwrap();
        LineObservation {
            line: line_through_pixels(ps.ul, ps.vl, pe.ul, pe.vl).unwrap(),
            u_start_right: ps.ur,
            u_end_right: pe.ur,
            sigma: 1.0,
        }
    }

    #[test]
    fn line_residual_zero_at_exact_observation() {
        let c = cam();
        let line = LineLandmark::new(Vector3::new(-1.0, 0.3, 4.0), Vector3::new(1.0, -0.2, 5.0));
        let obs = exact_line_obs(&Pose::identity(), &line, &c);
        let r = line_residual_stereo(&Pose::identity(), &line, &obs, &c).unwrap();
        assert!(r.norm() < 1e-9, "{r:?}");
    }

    #[test]
    fn line_residual_perpendicular_shift() {
        // vertical image line at u = cx: l = (1, 0, -cx) up to scale
        let c = cam();
        let z = 4.0;
        let line = LineLandmark::new(Vector3::new(0.0, -0.5, z), Vector3::new(0.0, 0.5, z));
        let obs = exact_line_obs(&Pose::identity(), &line, &c);
        let delta = 1e-3;
        let moved = LineLandmark::new(line.start + Vector3::x() * delta, line.end + Vector3::x() * delta);
        let r0 = line_residual_stereo(&Pose::identity(), &line, &obs, &c).unwrap();
        let r1 = line_residual_stereo(&Pose::identity(), &moved, &obs, &c).unwrap();
        let s = obs.line.normal_norm();
        let expected = 2.0 * c.fx * delta * obs.line.lx / (z * s);
        assert!((r1[0] - r0[0] - expected).abs() < 1e-9, "{} vs {expected}", r1[0] - r0[0]);
    }

    /// Second transcription of the residual, written point-to-line in pixels.
    fn residual_by_distances(pose: &Pose, line: &LineLandmark, obs: &LineObservation, c: &StereoCamera) -> Vector2<f64> {
        let mut e = Vector2::zeros();
        for (p, ur) in [(line.start, obs.u_start_right), (line.end, obs.u_end_right)] {
            let pc = pose.to_homogeneous() * p.push(1.0);
            let u = c.fx * pc.x / pc.z + c.cx;
            let v = c.fy * pc.y / pc.z + c.cy;
            e[0] += obs.line.distance(u, v);
            e[1] += obs.line.distance(ur + c.bf / pc.z, v);
        }
        e
    }

    #[test]
    fn line_residual_matches_independent_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let c = cam();
        for _ in 0..300 {
            let pose = random_pose(&mut rng);
            let line = LineLandmark::new(random_point_in_view(&mut rng, &pose), random_point_in_view(&mut rng, &pose));
            let obs = LineObservation {
                line: line_through_pixels(
                    rng.random_range(0.0..640.0),
                    rng.random_range(0.0..480.0),
                    rng.random_range(0.0..640.0),
                    rng.random_range(0.0..480.0),
                )
                .unwrap(),
                u_start_right: rng.random_range(0.0..640.0),
                u_end_right: rng.random_range(0.0..640.0),
                sigma: 1.0,
            };
            let a = line_residual_stereo(&pose, &line, &obs, &c).unwrap();
            let b = residual_by_distances(&pose, &line, &obs, &c);
            assert!((a - b).norm() < 1e-7 * (1.0 + b.norm()));
        }
    }

    #[test]
    fn line_camera_jacobian_examples() {
        let c = cam();
        let l = LineCoeffs::new(1.0, 0.0, -3.0);
        let j = line_jacobian_camera(&Vector3::new(0.0, 0.0, 1.0), &l, &c).unwrap();
        assert_eq!(j[(0, 0)], c.fx);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let pc = Vector3::new(rng.random(), rng.random(), rng.random_range(0.5..10.0));
            let l = LineCoeffs::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random());
            for model in [LineModel::Consistent, LineModel::Literal] {
                let j = line_jacobian_camera_with(&pc, &l, &c, model).unwrap();
                assert_eq!(j.row(2).norm(), 0.0);
                let jp = line_jacobian_pose_with(&pc, &l, &c, model).unwrap();
                assert_eq!(jp.row(2).norm(), 0.0);
            }
        }
        assert!(line_jacobian_camera(&Vector3::new(0.0, 0.0, 0.0), &l, &c).is_err());
    }

    #[test]
    fn landmark_jacobian_sign_symmetry() {
        let c = cam();
        let l = LineCoeffs::new(0.3, -0.7, 12.0);
        let pc = Vector3::new(0.4, -0.2, 3.0);
        let id = line_jacobian_landmark(&Pose::identity(), &pc, &l, &c).unwrap();
        assert_eq!(id, line_jacobian_camera(&pc, &l, &c).unwrap());
        let rz = Pose::new(crate::geometry::so3_exp(&Vector3::new(0.0, 0.0, std::f64::consts::PI)), Vector3::zeros());
        let flipped = line_jacobian_landmark(&rz, &pc, &l, &c).unwrap();
        for r in 0..3 {
            assert!((flipped[(r, 0)] + id[(r, 0)]).abs() < 1e-12);
            assert!((flipped[(r, 1)] + id[(r, 1)]).abs() < 1e-12);
            assert!((flipped[(r, 2)] - id[(r, 2)]).abs() < 1e-12);
        }
    }

    #[test]
    fn pose_jacobian_entries() {
        let c = cam();
        let l = LineCoeffs::new(0.6, 0.8, -100.0);
        let pc = Vector3::new(0.0, 0.0, 2.5);
        let jp = line_jacobian_pose_with(&pc, &l, &c, LineModel::Consistent).unwrap();
        let jc = line_jacobian_camera(&pc, &l, &c).unwrap();
        assert_eq!(jp[(0, 0)], c.fx * l.lx / (pc.z * l.normal_norm()));
        assert_eq!(jp.fixed_view::<3, 3>(0, 0).into_owned(), jc);
        assert_eq!(jp[(0, 5)], 0.0);
        let lit = line_jacobian_pose_with(&pc, &l, &c, LineModel::Literal).unwrap();
        assert_eq!(lit[(0, 0)], jp[(0, 0)]);
    }

    #[test]
    fn jacobians_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let c = cam();
        let h = 1e-6;
        for _ in 0..200 {
            let pose = random_pose(&mut rng);
            let line = LineLandmark::new(random_point_in_view(&mut rng, &pose), random_point_in_view(&mut rng, &pose));
            let obs = exact_line_obs(&pose, &line, &c);
            let (jp, js, je) = line_jacobians(&pose, &line, &obs, &c).unwrap();
            for k in 0..6 {
                let mut d = Twist::zeros();
                d[k] = h;
                let rp = line_residual_stereo(&pose.retract(&d), &line, &obs, &c).unwrap();
                let rm = line_residual_stereo(&pose.retract(&(-d)), &line, &obs, &c).unwrap();
                let fd = (rp - rm) / (2.0 * h);
                for r in 0..2 {
                    assert!(close(jp[(r, k)], fd[r], 1e-4, 1e-6), "pose ({r},{k}) {} vs {}", jp[(r, k)], fd[r]);
                }
            }
            for k in 0..3 {
                let mut d = Vector3::zeros();
                d[k] = h;
                for (jac, which) in [(js, 0), (je, 1)] {
                    let shift = |s: f64| {
                        let mut l2 = line;
                        if which == 0 {
                            l2.start += d * s;
                        } else {
                            l2.end += d * s;
                        }
                        line_residual_stereo(&pose, &l2, &obs, &c).unwrap()
                    };
                    let fd = (shift(1.0) - shift(-1.0)) / (2.0 * h);
                    for r in 0..2 {
                        assert!(close(jac[(r, k)], fd[r], 1e-4, 1e-6));
                    }
                }
            }
            let pw = random_point_in_view(&mut rng, &pose);
            let obs_p = PointObservation { ul: 1.0, vl: 2.0, ur: 3.0, sigma: 1.0 };
            let (jpp, jpl) = point_jacobians(&pose, &pw, &c).unwrap();
            for k in 0..6 {
                let mut d = Twist::zeros();
                d[k] = h;
                let fd = (point_residual(&pose.retract(&d), &pw, &obs_p, &c).unwrap()
                    - point_residual(&pose.retract(&(-d)), &pw, &obs_p, &c).unwrap())
                    / (2.0 * h);
                for r in 0..3 {
                    assert!(close(jpp[(r, k)], fd[r], 1e-6, 1e-6), "{} {}", jpp[(r, k)], fd[r]);
                }
            }
            for k in 0..3 {
                let mut d = Vector3::zeros();
                d[k] = h;
                let fd = (point_residual(&pose, &(pw + d), &obs_p, &c).unwrap()
                    - point_residual(&pose, &(pw - d), &obs_p, &c).unwrap())
                    / (2.0 * h);
                for r in 0..3 {
                    assert!(close(jpl[(r, k)], fd[r], 1e-6, 1e-6));
                }
            }
        }
    }

    #[test]
    fn collinear_reparameterization_keeps_residual() {
        // A 3D line at constant depth projects affinely, so the summed signed
        // distances only depend on the endpoints' midpoint along the line.
        let c = cam();
        let a = Vector3::new(-1.0, 0.2, 4.0);
        let b = Vector3::new(1.0, 0.4, 4.0);
        let line = LineLandmark::new(a, b);
        let obs = LineObservation {
            line: line_through_pixels(100.0, 200.0, 500.0, 260.0).unwrap(),
            u_start_right: 300.0,
            u_end_right: 310.0,
            sigma: 1.0,
        };
        let r1 = line_residual_stereo(&Pose::identity(), &line, &obs, &c).unwrap();
        for t in [-0.5, 0.1, 0.3, 2.0] {
            let other = LineLandmark::new(a + (b - a) * t, a + (b - a) * (1.0 - t));
            let r2 = line_residual_stereo(&Pose::identity(), &other, &obs, &c).unwrap();
            assert!((r1 - r2).norm() < 1e-9, "t = {t}: {r1:?} vs {r2:?}");
        }
        // exact observation: any reparameterization with consistent right columns is zero
        let exact = exact_line_obs(&Pose::identity(), &line, &c);
        let other = LineLandmark::new(a + (b - a) * 0.2, a + (b - a) * 1.7);
        let exact_other = exact_line_obs(&Pose::identity(), &other, &c);
        let obs2 = LineObservation { line: exact.line, ..exact_other };
        assert!(line_residual_stereo(&Pose::identity(), &other, &obs2, &c).unwrap().norm() < 1e-9);
    }
}
