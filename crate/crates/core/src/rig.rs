//! Rigid transforms, pinhole intrinsics and the multi-camera rig.
//!
//! Conventions used throughout the crate:
//!
//! * A [`RigidTransform`] maps points: `p' = R p + t`.
//! * `compose(a, b)` is the matrix product `a * b` (apply `b` first).
//! * A camera extrinsic maps camera coordinates to vehicle coordinates, so
//!   `E_j^-1 E_i` maps points from camera `i` into camera `j`.
//! * Camera axes are x right, y down, z forward. Integer pixel coordinates
//!   address pixel centers.
//! * Twists are ordered `(rho, omega)`: translational part first, rotation
//!   vector (radians) last.

use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Vector3, Vector6};

use crate::error::{Error, Result};

/// Tangent-space coordinates of a rigid transform, `(rho, omega)`.
pub type Twist = Vector6<f64>;

/// Tolerance for the orthonormality and determinant checks on rotations.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// Angles closer than this to pi are rejected by [`log_se3`].
const LOG_PI_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform, rejecting rotations that are not in SO(3) within
    /// [`ROTATION_TOLERANCE`].
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = Self {
            rotation,
            translation,
        };
        t.check(ROTATION_TOLERANCE)?;
        Ok(t)
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about the camera/vehicle y axis (pointing down), so a positive
    /// angle turns the optical axis toward +x.
    pub fn from_yaw(yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a transform from a homogeneous 4x4 matrix.
    ///
    /// Matrices read from text files rarely carry an exactly orthonormal
    /// rotation, so the rotation block is projected back onto SO(3) when it
    /// is within `tolerance` of it; anything further away is rejected.
    pub fn from_matrix(m: &Matrix4<f64>, tolerance: f64) -> Result<Self> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidTransform("non-finite entry".into()));
        }
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::InvalidTransform(format!(
                "last row must be [0, 0, 0, 1], got {bottom:?}"
            )));
        }
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t = Vector3::new(m[(0, 3)], m[(1, 3)], m[(2, 3)]);
        let err = orthonormality_error(&r);
        if err > tolerance {
            return Err(Error::InvalidTransform(format!(
                "rotation block is {err:.3e} away from SO(3)"
            )));
        }
        Ok(Self {
            rotation: nearest_rotation(&r),
            translation: t,
        })
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Returns an error when the rotation is not orthonormal with unit
    /// determinant within `tolerance`, or any entry is non-finite.
    pub fn check(&self, tolerance: f64) -> Result<()> {
        if self
            .rotation
            .iter()
            .chain(self.translation.iter())
            .any(|x| !x.is_finite())
        {
            return Err(Error::InvalidTransform("non-finite entry".into()));
        }
        let err = orthonormality_error(&self.rotation);
        if err > tolerance {
            return Err(Error::InvalidTransform(format!(
                "rotation deviates from SO(3) by {err:.3e}"
            )));
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.check(ROTATION_TOLERANCE).is_ok()
    }

    /// Scales the translation, leaving the rotation untouched.
    pub fn with_scaled_translation(&self, s: f64) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation,
            translation: self.translation * s,
        }
    }
}

impl Mul for RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: RigidTransform) -> RigidTransform {
        self.compose(&rhs)
    }
}

impl<'a> Mul<&'a RigidTransform> for &'a RigidTransform {
    type Output = RigidTransform;

    fn mul(self, rhs: &'a RigidTransform) -> RigidTransform {
        self.compose(rhs)
    }
}

/// Largest of `max |R^T R - I|` and `|det R - 1|`.
pub fn orthonormality_error(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r - Matrix3::identity();
    let max_gram = gram.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    max_gram.max((r.determinant() - 1.0).abs())
}

fn nearest_rotation(r: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = r.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

/// Matrix product `a * b`: the chained map applying `b`, then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    a.compose(b)
}

pub fn invert(t: &RigidTransform) -> RigidTransform {
    t.inverse()
}

/// Carries the front camera's temporal pose over to camera `i` through the
/// rig extrinsics: `E_i^-1 E_front T_front E_front^-1 E_i`.
pub fn distribute_pose(
    t_front: &RigidTransform,
    e_front: &RigidTransform,
    e_i: &RigidTransform,
) -> RigidTransform {
    let front_from_i = e_front.inverse() * *e_i;
    front_from_i.inverse() * *t_front * front_from_i
}

/// Pose of the horizontally mirrored view pair: negates `r12, r13, r21, r31`
/// and `t1`, i.e. conjugation by `diag(-1, 1, 1)`.
pub fn flip_pose(t: &RigidTransform) -> RigidTransform {
    const SIGN: [[f64; 3]; 3] = [[1.0, -1.0, -1.0], [-1.0, 1.0, 1.0], [-1.0, 1.0, 1.0]];
    let mut out = *t;
    for (r, row) in SIGN.iter().enumerate() {
        for (c, s) in row.iter().enumerate() {
            out.rotation[(r, c)] *= s;
        }
    }
    out.translation[0] = -out.translation[0];
    out
}

/// Twist of `flip_pose(exp(xi))`. The map is linear, diagonal and its own
/// inverse, so it also pulls gradients back from the flipped parameterization.
pub fn flip_twist(xi: &Twist) -> Twist {
    Twist::new(-xi[0], xi[1], xi[2], xi[3], -xi[4], -xi[5])
}

pub fn flip_intrinsics(k: &Intrinsics) -> Intrinsics {
    Intrinsics {
        cx: (k.width as f64 - 1.0) - k.cx,
        ..*k
    }
}

pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w[2], w[1], w[2], 0.0, -w[0], -w[1], w[0], 0.0)
}

/// Exponential map `se(3) -> SE(3)`; the twist is `(rho, omega)`.
pub fn exp_se3(xi: &Twist) -> RigidTransform {
    let rho = Vector3::new(xi[0], xi[1], xi[2]);
    let omega = Vector3::new(xi[3], xi[4], xi[5]);
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let w = skew(&omega);
    let w2 = w * w;
    // a = sin(t)/t, b = (1-cos t)/t^2, c = (t - sin t)/t^3
    let (a, b, c) = if theta < 1e-4 {
        (
            1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0,
            0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0,
        )
    } else {
        let (s, co) = theta.sin_cos();
        (
            s / theta,
            (1.0 - co) / theta2,
            (theta - s) / (theta2 * theta),
        )
    };
    let rotation = Matrix3::identity() + w * a + w2 * b;
    let v = Matrix3::identity() + w * b + w2 * c;
    RigidTransform {
        rotation,
        translation: v * rho,
    }
}

/// Logarithm map `SE(3) -> se(3)`. Fails when the rotation angle is within
/// `1e-4` of pi, where the rotation axis is ill-determined.
pub fn log_se3(t: &RigidTransform) -> Result<Twist> {
    let r = &t.rotation;
    let vee = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    let cos = 0.5 * (r.trace() - 1.0);
    let theta = (0.5 * vee.norm()).atan2(cos);
    if std::f64::consts::PI - theta < LOG_PI_MARGIN {
        return Err(Error::IllConditionedLog { angle: theta });
    }
    let theta2 = theta * theta;
    let scale = if theta < 1e-4 {
        0.5 * (1.0 + theta2 / 6.0 + 7.0 * theta2 * theta2 / 360.0)
    } else {
        theta / (2.0 * theta.sin())
    };
    let omega = vee * scale;
    let w = skew(&omega);
    // V^-1 = I - W/2 + k W^2, k = (1 - t sin t / (2 (1 - cos t))) / t^2
    // the closed form cancels badly for small angles, so the series runs
    // further out here than for the other coefficients
    let k = if theta < 1e-2 {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half / half.tan()) / theta2
    };
    let v_inv = Matrix3::identity() - w * 0.5 + w * w * k;
    let rho = v_inv * t.translation;
    Ok(Twist::new(
        rho[0], rho[1], rho[2], omega[0], omega[1], omega[2],
    ))
}

/// Pinhole intrinsics with the image size they apply to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.check()?;
        Ok(k)
    }

    /// Intrinsics whose outermost pixel centers span `fov_deg` horizontally,
    /// with square pixels and a centered principal point.
    pub fn from_fov(fov_deg: f64, width: usize, height: usize) -> Result<Self> {
        if !(fov_deg > 0.0 && fov_deg < 180.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "field of view must be in (0, 180) degrees, got {fov_deg}"
            )));
        }
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        let f = cx / (fov_deg.to_radians() / 2.0).tan();
        Self::new(f, f, cx, cy, width, height)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.fx.is_finite() && self.fx > 0.0 && self.fy.is_finite() && self.fy > 0.0) {
            return Err(Error::InvalidIntrinsics(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(Error::InvalidIntrinsics(
                "non-finite principal point".into(),
            ));
        }
        if self.width < 2 || self.height < 2 {
            return Err(Error::InvalidIntrinsics(format!(
                "image must be at least 2x2, got {}x{}",
                self.width, self.height
            )));
        }
        Ok(())
    }

    /// Ray through pixel `(u, v)` scaled to unit depth.
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    /// Maps camera coordinates to vehicle coordinates.
    pub extrinsic: RigidTransform,
}

/// Ordered cameras of a surround rig. Camera 0 is the front view.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    cameras: Vec<Camera>,
}

impl CameraRig {
    pub fn new(cameras: Vec<Camera>) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::InvalidRig("a rig needs at least one camera".into()));
        }
        for (i, cam) in cameras.iter().enumerate() {
            cam.intrinsics
                .check()
                .map_err(|e| Error::InvalidRig(format!("camera {i}: {e}")))?;
            cam.extrinsic
                .check(ROTATION_TOLERANCE)
                .map_err(|e| Error::InvalidRig(format!("camera {i}: {e}")))?;
        }
        Ok(Self { cameras })
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn camera(&self, i: usize) -> &Camera {
        &self.cameras[i]
    }

    pub fn intrinsics(&self, i: usize) -> &Intrinsics {
        &self.cameras[i].intrinsics
    }

    pub fn extrinsic(&self, i: usize) -> &RigidTransform {
        &self.cameras[i].extrinsic
    }

    /// Maps points in camera `from` to camera `to`: `E_to^-1 E_from`.
    pub fn relative(&self, from: usize, to: usize) -> RigidTransform {
        self.extrinsic(to).inverse() * *self.extrinsic(from)
    }

    /// Spatial neighbours on the ring formed by the camera order, without
    /// duplicates and never including `i` itself.
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        let n = self.len();
        if n < 2 {
            return Vec::new();
        }
        let prev = (i + n - 1) % n;
        let next = (i + 1) % n;
        if prev == next {
            vec![next]
        } else {
            vec![prev, next]
        }
    }

    /// Every ordered `(target, source)` pair of ring neighbours.
    pub fn neighbor_pairs(&self) -> Vec<(usize, usize)> {
        (0..self.len())
            .flat_map(|i| self.neighbors(i).into_iter().map(move |j| (i, j)))
            .collect()
    }

    /// The same rig seen through a horizontal mirror: every intrinsic
    /// flipped and every extrinsic conjugated like [`flip_pose`], which flips
    /// all relative poses between cameras consistently.
    pub fn flipped(&self) -> CameraRig {
        CameraRig {
            cameras: self
                .cameras
                .iter()
                .map(|c| Camera {
                    intrinsics: flip_intrinsics(&c.intrinsics),
                    extrinsic: flip_pose(&c.extrinsic),
                })
                .collect(),
        }
    }
}
