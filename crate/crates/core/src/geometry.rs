//! Rigid-body transforms, the SE(3) exponential map and rectified stereo projection.
//!
//! Poses are camera-from-world: `transform_point(T, P_world)` yields the point in
//! the camera frame. Tangent vectors are ordered `(rho, phi)` (translation first)
//! and perturbations are applied on the left, `T' = exp(xi) * T`.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector6};
use thiserror::Error;

/// Smallest admissible depth for projection (meters).
pub const Z_MIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum GeometryError {
    #[error("depth {z} is at or below the near plane {Z_MIN}")]
    DepthTooSmall { z: f64 },
}

/// Minimal pose perturbation: `rho` (meters) then `phi` (radians).
pub type Twist = Vector6<f64>;

/// Rigid transform mapping world coordinates into the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Applies a left perturbation `exp(xi) * self`.
    pub fn retract(&self, xi: &Twist) -> Pose {
        se3_exp(xi).compose(self)
    }

    /// Camera center in world coordinates (for camera-from-world poses).
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Re-orthonormalizes the rotation via SVD projection onto SO(3).
    pub fn normalized(&self) -> Pose {
        Pose {
            rotation: project_to_so3(&self.rotation),
            translation: self.translation,
        }
    }

    /// Largest deviation of `RᵀR` from identity, plus `|det R - 1|`.
    pub fn orthonormality_error(&self) -> f64 {
        let e = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        e.max((self.rotation.determinant() - 1.0).abs())
    }
}

/// Rectified pinhole stereo pair. `bf` is baseline times `fx`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub bf: f64,
    pub width: u32,
    pub height: u32,
}

impl StereoCamera {
    /// 640×480 preset with the default stub intrinsics.
    pub fn vga() -> Self {
        Self {
            fx: 450.0,
            fy: 450.0,
            cx: 320.0,
            cy: 240.0,
            bf: 50.0,
            width: 640,
            height: 480,
        }
    }

    /// 1241×376 wide preset.
    pub fn wide() -> Self {
        Self {
            fx: 450.0,
            fy: 450.0,
            cx: 620.5,
            cy: 188.0,
            bf: 50.0,
            width: 1241,
            height: 376,
        }
    }

    /// 1241×376 with the focal length and baseline of a driving rig.
    pub fn kitti_like() -> Self {
        Self {
            fx: 718.0,
            fy: 718.0,
            cx: 620.5,
            cy: 188.0,
            bf: 386.0,
            width: 1241,
            height: 376,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.fx > 0.0 && self.fy > 0.0 && self.bf > 0.0 && self.width > 0 && self.height > 0
    }

    pub fn project_stereo(&self, pc: &Vector3<f64>) -> Result<StereoProjection, GeometryError> {
        project_stereo(self, pc)
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// Pixel coordinates of a point in the left image plus its right-image column.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoProjection {
    pub ul: f64,
    pub vl: f64,
    pub ur: f64,
}

impl StereoProjection {
    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.ul, self.vl, self.ur)
    }
}

pub fn transform_point(pose: &Pose, p: &Vector3<f64>) -> Vector3<f64> {
    pose.transform_point(p)
}

pub fn project_stereo(cam: &StereoCamera, pc: &Vector3<f64>) -> Result<StereoProjection, GeometryError> {
    let z = pc.z;
    if !(z > Z_MIN) {
        return Err(GeometryError::DepthTooSmall { z });
    }
    let ul = cam.fx * pc.x / z + cam.cx;
    let vl = cam.fy * pc.y / z + cam.cy;
    Ok(StereoProjection {
        ul,
        vl,
        ur: ul - cam.bf / z,
    })
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues formula.
pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let k2 = k * k;
    let (a, b) = if theta2 < 1e-10 {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k2 * b
}

pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < 1e-5 {
        // sin(theta)/theta ≈ 1 - theta²/6
        return w * (0.5 * (1.0 + theta * theta / 6.0));
    }
    if std::f64::consts::PI - theta < 1e-4 {
        // Near pi the antisymmetric part vanishes; recover a a' from the
        // symmetric part, (R + R')/2 = cos(theta) I + (1 - cos(theta)) a a'.
        let sym = (r + r.transpose()) * 0.5;
        let aat = (sym - Matrix3::identity() * cos_theta) / (1.0 - cos_theta);
        let mut best = 0;
        for i in 1..3 {
            if aat[(i, i)] > aat[(best, best)] {
                best = i;
            }
        }
        let d = aat[(best, best)].max(0.0).sqrt();
        let mut axis = Vector3::zeros();
        for i in 0..3 {
            axis[i] = if i == best { d } else { aat[(i, best)] / d };
        }
        axis.normalize_mut();
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    w * (theta / (2.0 * theta.sin()))
}

/// Left Jacobian of SO(3), mapping `rho` to the translation of `exp(xi)`.
fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let (b, c) = if theta2 < 1e-10 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * b + k * k * c
}

fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    let c = if theta2 < 1e-10 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / theta2
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

pub fn se3_exp(xi: &Twist) -> Pose {
    let rho = xi.fixed_rows::<3>(0).into_owned();
    let phi = xi.fixed_rows::<3>(3).into_owned();
    Pose {
        rotation: so3_exp(&phi),
        translation: so3_left_jacobian(&phi) * rho,
    }
}

pub fn se3_log(pose: &Pose) -> Twist {
    let phi = so3_log(&pose.rotation);
    let rho = so3_left_jacobian_inv(&phi) * pose.translation;
    Twist::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z)
}

/// Geodesic rotation angle of `r` (radians, in `[0, pi]`).
///
/// The cosine comes from the trace (clamped to `[-1, 1]`); pairing it with the
/// sine from the antisymmetric part keeps small angles accurate, where `acos`
/// alone loses half the digits.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    (0.5 * w.norm()).atan2(cos)
}

pub fn project_to_so3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut d = Matrix3::identity();
        d[(2, 2)] = -1.0;
        r = u * d * v_t;
    }
    r
}

/// Camera-from-world pose of a camera at `center` looking at `target`, with the
/// image y axis aligned as closely as possible with world `down`.
pub fn look_at(center: &Vector3<f64>, target: &Vector3<f64>, down: &Vector3<f64>) -> Pose {
    let forward = (target - center).normalize();
    let right = down.cross(&forward).normalize();
    let down = forward.cross(&right);
    let r_wc = Matrix3::from_columns(&[right, down, forward]);
    let r_cw = r_wc.transpose();
    Pose {
        rotation: r_cw,
        translation: -(r_cw * center),
    }
}
