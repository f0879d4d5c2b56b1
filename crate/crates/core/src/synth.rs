//! Analytic renderer for scenes made of textured planes, plus rig and
//! sequence generators that provide exact ground truth.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{DepthMap, Grid, Image, Mask};
use crate::losses::{SurroundBundle, TemporalSource};
use crate::rig::{flip_pose, Camera, CameraRig, Intrinsics, RigidTransform};

/// Distance from the vehicle origin to each camera of [`make_rig`].
pub const MOUNT_RADIUS: f64 = 1.0;

const HIT_EPS: f64 = 1e-9;

/// `0.5 + 0.25 sin(a x + b) + 0.25 sin(c y + d)` per channel, with `x, y`
/// measured along the plane's own axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    /// `[a, b, c, d]` for red, green and blue.
    pub coeffs: [[f64; 4]; 3],
}

impl Texture {
    /// Frequencies uniform in `[freq_lo, freq_hi]` rad/m, phases uniform.
    pub fn random(rng: &mut impl Rng, freq_lo: f64, freq_hi: f64) -> Texture {
        let mut coeffs = [[0.0; 4]; 3];
        for ch in &mut coeffs {
            ch[0] = rng.random_range(freq_lo..=freq_hi);
            ch[1] = rng.random_range(0.0..std::f64::consts::TAU);
            ch[2] = rng.random_range(freq_lo..=freq_hi);
            ch[3] = rng.random_range(0.0..std::f64::consts::TAU);
        }
        Texture { coeffs }
    }

    pub fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (o, [a, b, c, d]) in out.iter_mut().zip(self.coeffs) {
            *o = (0.5 + 0.25 * (a * x + b).sin() + 0.25 * (c * y + d).sin()).clamp(0.0, 1.0);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TexturedPlane {
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    /// Texture axes: unit, orthogonal to each other and to the normal.
    pub u_axis: Vector3<f64>,
    pub v_axis: Vector3<f64>,
    pub texture: Texture,
}

impl TexturedPlane {
    /// A plane with texture axes derived from the normal.
    pub fn new(point: Vector3<f64>, normal: Vector3<f64>, texture: Texture) -> Result<Self> {
        let n = normal
            .try_normalize(1e-12)
            .ok_or_else(|| Error::InvalidConfig("plane normal has zero length".into()))?;
        let helper = if n.y.abs() < 0.9 {
            Vector3::y()
        } else {
            Vector3::x()
        };
        let u_axis = helper.cross(&n).normalize();
        let v_axis = n.cross(&u_axis);
        Ok(Self {
            point,
            normal: n,
            u_axis,
            v_axis,
            texture,
        })
    }

    pub fn check(&self) -> Result<()> {
        let unit = |v: &Vector3<f64>| (v.norm() - 1.0).abs() < 1e-9;
        let ortho = |a: &Vector3<f64>, b: &Vector3<f64>| a.dot(b).abs() < 1e-9;
        if !(unit(&self.normal) && unit(&self.u_axis) && unit(&self.v_axis)) {
            return Err(Error::InvalidConfig(
                "plane axes must be unit length".into(),
            ));
        }
        if !(ortho(&self.normal, &self.u_axis)
            && ortho(&self.normal, &self.v_axis)
            && ortho(&self.u_axis, &self.v_axis))
        {
            return Err(Error::InvalidConfig("plane axes must be orthogonal".into()));
        }
        Ok(())
    }

    /// Ray parameter of the intersection with `origin + t dir`, if `t > 0`.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        let denom = self.normal.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = self.normal.dot(&(self.point - origin)) / denom;
        (t > HIT_EPS).then_some(t)
    }

    pub fn color_at(&self, p: &Vector3<f64>) -> [f64; 3] {
        let d = p - self.point;
        self.texture.color(d.dot(&self.u_axis), d.dot(&self.v_axis))
    }

    /// Reflection across the world plane `x = 0`.
    pub fn mirrored(&self) -> TexturedPlane {
        let m = |v: &Vector3<f64>| Vector3::new(-v.x, v.y, v.z);
        TexturedPlane {
            point: m(&self.point),
            normal: m(&self.normal),
            u_axis: m(&self.u_axis),
            v_axis: m(&self.v_axis),
            texture: self.texture,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanarScene {
    pub planes: Vec<TexturedPlane>,
}

impl PlanarScene {
    pub fn new(planes: Vec<TexturedPlane>) -> Result<Self> {
        for p in &planes {
            p.check()?;
        }
        Ok(Self { planes })
    }

    /// Closed box around the vehicle origin: walls at `x = +-half_width`,
    /// `z = +-half_length`, floor at `y = floor` and ceiling at
    /// `y = ceiling` (y points down).
    pub fn room(
        half_width: f64,
        half_length: f64,
        ceiling: f64,
        floor: f64,
        seed: u64,
        freq: (f64, f64),
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let faces = [
            (
                Vector3::new(half_width, 0.0, 0.0),
                Vector3::new(-1.0, 0.0, 0.0),
            ),
            (
                Vector3::new(-half_width, 0.0, 0.0),
                Vector3::new(1.0, 0.0, 0.0),
            ),
            (
                Vector3::new(0.0, 0.0, half_length),
                Vector3::new(0.0, 0.0, -1.0),
            ),
            (
                Vector3::new(0.0, 0.0, -half_length),
                Vector3::new(0.0, 0.0, 1.0),
            ),
            (Vector3::new(0.0, floor, 0.0), Vector3::new(0.0, -1.0, 0.0)),
            (Vector3::new(0.0, ceiling, 0.0), Vector3::new(0.0, 1.0, 0.0)),
        ];
        let planes = faces
            .into_iter()
            .map(|(p, n)| TexturedPlane::new(p, n, Texture::random(&mut rng, freq.0, freq.1)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(planes)
    }

    /// Nearest positive hit: `(ray parameter, plane index)`.
    pub fn trace(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        for (k, plane) in self.planes.iter().enumerate() {
            if let Some(t) = plane.intersect(origin, dir) {
                if best.is_none_or(|(bt, _)| t < bt) {
                    best = Some((t, k));
                }
            }
        }
        best
    }

    pub fn mirrored(&self) -> PlanarScene {
        PlanarScene {
            planes: self.planes.iter().map(TexturedPlane::mirrored).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendering {
    pub image: Image,
    /// Camera-frame z of the hit; 0 where the ray hits nothing.
    pub depth: DepthMap,
    pub valid: Mask,
}

/// Ray-casts every pixel centre of a camera with pose `camera_to_world`.
pub fn render(scene: &PlanarScene, k: &Intrinsics, camera_to_world: &RigidTransform) -> Rendering {
    let (w, h) = k.dims();
    let origin = camera_to_world.translation;
    let mut image = Image::filled(w, h, [0.0; 3]);
    let mut depth = DepthMap::filled(w, h, 0.0);
    let mut valid = Mask::filled(w, h, false);
    for y in 0..h {
        for x in 0..w {
            // the ray has unit z, so its parameter is the camera-frame depth
            let dir = camera_to_world.rotation * k.ray(x as f64, y as f64);
            if let Some((t, idx)) = scene.trace(&origin, &dir) {
                let i = y * w + x;
                image.data_mut()[i] = scene.planes[idx].color_at(&(origin + dir * t));
                depth.data_mut()[i] = t;
                valid.data_mut()[i] = true;
            }
        }
    }
    Rendering {
        image,
        depth,
        valid,
    }
}

/// `n` cameras on a circle of radius [`MOUNT_RADIUS`], camera `i` yawed by
/// `i * yaw_step_deg`, each with horizontal field of view `fov_deg`.
pub fn make_rig(
    n: usize,
    yaw_step_deg: f64,
    fov_deg: f64,
    width: usize,
    height: usize,
) -> Result<CameraRig> {
    if n == 0 {
        return Err(Error::InvalidRig("a rig needs at least one camera".into()));
    }
    let intrinsics = Intrinsics::from_fov(fov_deg, width, height)?;
    let cameras = (0..n)
        .map(|i| {
            let yaw = (i as f64 * yaw_step_deg).to_radians();
            let mut extrinsic = RigidTransform::from_yaw(yaw);
            extrinsic.translation = Vector3::new(yaw.sin(), 0.0, yaw.cos()) * MOUNT_RADIUS;
            Camera {
                intrinsics,
                extrinsic,
            }
        })
        .collect();
    CameraRig::new(cameras)
}

/// Vehicle motion per step: maps vehicle coordinates at step `k + 1` to
/// vehicle coordinates at step `k`, so forward motion has positive `z`
/// translation. Steps cycle when the list is shorter than the sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoMotion {
    pub steps: Vec<RigidTransform>,
}

impl EgoMotion {
    pub fn constant(step: RigidTransform) -> Self {
        Self { steps: vec![step] }
    }

    pub fn identity() -> Self {
        Self::constant(RigidTransform::identity())
    }

    pub fn step(&self, k: usize) -> &RigidTransform {
        &self.steps[k % self.steps.len()]
    }

    pub fn mirrored(&self) -> EgoMotion {
        EgoMotion {
            steps: self.steps.iter().map(flip_pose).collect(),
        }
    }
}

/// Rendered views of a rig moving through a scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub rig: CameraRig,
    /// Vehicle-to-world pose per step; the world frame is the vehicle at
    /// step 0.
    pub vehicle_poses: Vec<RigidTransform>,
    /// `renders[step][camera]`.
    pub renders: Vec<Vec<Rendering>>,
}

pub fn make_sequence(
    scene: &PlanarScene,
    rig: &CameraRig,
    ego: &EgoMotion,
    steps: usize,
) -> Result<Sequence> {
    if ego.steps.is_empty() {
        return Err(Error::InvalidConfig(
            "ego motion needs at least one step".into(),
        ));
    }
    for (k, s) in ego.steps.iter().enumerate() {
        s.check(crate::rig::ROTATION_TOLERANCE)
            .map_err(|e| Error::InvalidConfig(format!("ego step {k}: {e}")))?;
    }
    let mut vehicle_poses = Vec::with_capacity(steps);
    let mut v = RigidTransform::identity();
    for k in 0..steps {
        vehicle_poses.push(v);
        v = v * *ego.step(k);
    }
    let renders = vehicle_poses
        .iter()
        .map(|vp| {
            rig.cameras()
                .iter()
                .map(|c| render(scene, &c.intrinsics, &(*vp * c.extrinsic)))
                .collect()
        })
        .collect();
    Ok(Sequence {
        rig: rig.clone(),
        vehicle_poses,
        renders,
    })
}

impl Sequence {
    pub fn steps(&self) -> usize {
        self.vehicle_poses.len()
    }

    pub fn camera_to_world(&self, step: usize, camera: usize) -> RigidTransform {
        self.vehicle_poses[step] * *self.rig.extrinsic(camera)
    }

    /// Ground-truth map of camera points from `step` to `step - 1` or
    /// `step + 1`.
    pub fn temporal_pose(
        &self,
        step: usize,
        camera: usize,
        source: TemporalSource,
    ) -> RigidTransform {
        let other = match source {
            TemporalSource::Previous => step - 1,
            TemporalSource::Next => step + 1,
        };
        self.camera_to_world(other, camera).inverse() * self.camera_to_world(step, camera)
    }

    pub fn images(&self, step: usize) -> Vec<Image> {
        self.renders[step].iter().map(|r| r.image.clone()).collect()
    }

    pub fn depths(&self, step: usize) -> Vec<DepthMap> {
        self.renders[step].iter().map(|r| r.depth.clone()).collect()
    }

    pub fn valid_masks(&self, step: usize) -> Vec<Mask> {
        self.renders[step].iter().map(|r| r.valid.clone()).collect()
    }

    /// The three frames around `center` with ground-truth front poses.
    pub fn bundle(&self, center: usize) -> Result<SurroundBundle> {
        if center == 0 || center + 1 >= self.steps() {
            return Err(Error::InvalidConfig(format!(
                "center step {center} needs a neighbour on both sides in a {}-step sequence",
                self.steps()
            )));
        }
        Ok(SurroundBundle {
            rig: self.rig.clone(),
            frames: [
                self.images(center - 1),
                self.images(center),
                self.images(center + 1),
            ],
            front_poses: [
                self.temporal_pose(center, 0, TemporalSource::Previous),
                self.temporal_pose(center, 0, TemporalSource::Next),
            ],
        })
    }
}

/// One tilted plane facing the rig: its normal is yawed by `yaw_deg` and
/// pitched so that lower image rows see nearer surface. Texture axes follow
/// the plane, so the mirrored scene renders as an exact mirror image.
pub fn tilted_plane(
    distance: f64,
    yaw_deg: f64,
    slope: f64,
    seed: u64,
    freq: (f64, f64),
) -> Result<PlanarScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let yaw = RigidTransform::from_yaw(yaw_deg.to_radians()).rotation;
    let normal = yaw * Vector3::new(0.0, -slope, -1.0).normalize();
    let point = yaw * Vector3::new(0.0, 0.0, distance);
    let plane = TexturedPlane::new(point, normal, Texture::random(&mut rng, freq.0, freq.1))?;
    PlanarScene::new(vec![plane])
}

/// Fraction of pixels in `mask`.
pub fn mask_fraction(mask: &Grid<bool>) -> f64 {
    mask.count() as f64 / mask.len() as f64
}
