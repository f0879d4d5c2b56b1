//! Pinhole projection, backward warping of images and depth, and the two
//! ways of carrying depth across views: a dense transform-then-backward-warp
//! and a sparse forward warp with a z-buffer.

use nalgebra::Vector3;

use crate::imaging::{BilinearTaps, DepthMap, Grid, Image, Mask, BOUNDS_EPS};
use crate::rig::{CameraRig, Intrinsics, RigidTransform};

/// Camera-frame points on a pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloudGrid {
    pub points: Grid<Vector3<f64>>,
    pub valid: Mask,
}

fn depth_is_valid(d: f64) -> bool {
    d.is_finite() && d > 0.0
}

/// Lifts every pixel with a positive depth to its camera-frame point
/// `((u - cx) d / fx, (v - cy) d / fy, d)`.
pub fn backproject(depth: &DepthMap, k: &Intrinsics) -> PointCloudGrid {
    let (w, h) = depth.dims();
    let points = Grid::from_fn(w, h, |x, y| k.ray(x as f64, y as f64) * *depth.get(x, y));
    let valid = depth.map(|&d| depth_is_valid(d));
    PointCloudGrid { points, valid }
}

/// Projects a camera-frame point to `(u, v, depth)`; `None` behind the camera.
pub fn project(point: &Vector3<f64>, k: &Intrinsics) -> Option<(f64, f64, f64)> {
    if !(point.z > 0.0) {
        return None;
    }
    Some((
        k.fx * point.x / point.z + k.cx,
        k.fy * point.y / point.z + k.cy,
        point.z,
    ))
}

fn in_bounds(u: f64, v: f64, k: &Intrinsics) -> bool {
    u >= -BOUNDS_EPS
        && u <= k.width as f64 - 1.0 + BOUNDS_EPS
        && v >= -BOUNDS_EPS
        && v <= k.height as f64 - 1.0 + BOUNDS_EPS
}

/// Where one target pixel lands in the source view.
#[derive(Debug, Clone, Copy)]
pub struct Correspondence {
    pub u: f64,
    pub v: f64,
    pub taps: BilinearTaps,
    /// The target pixel's 3D point in the source camera frame.
    pub point: Vector3<f64>,
    /// Derivative of `point` with respect to the target pixel's depth.
    pub dpoint_ddepth: Vector3<f64>,
}

/// Per-pixel correspondences of a target view into a source view, computed
/// from the target depth and the target-to-source transform.
#[derive(Debug, Clone)]
pub struct CorrespondenceField {
    width: usize,
    height: usize,
    source: Intrinsics,
    entries: Vec<Option<Correspondence>>,
}

impl CorrespondenceField {
    pub fn new(
        target_depth: &DepthMap,
        t_target_to_source: &RigidTransform,
        k_target: &Intrinsics,
        k_source: &Intrinsics,
    ) -> Self {
        let (w, h) = target_depth.dims();
        let mut entries = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let d = *target_depth.get(x, y);
                entries.push(if depth_is_valid(d) {
                    let ray = k_target.ray(x as f64, y as f64);
                    let dpoint_ddepth = t_target_to_source.rotation * ray;
                    let point = dpoint_ddepth * d + t_target_to_source.translation;
                    project(&point, k_source)
                        .filter(|&(u, v, _)| in_bounds(u, v, k_source))
                        .and_then(|(u, v, _)| {
                            BilinearTaps::new(k_source.width, k_source.height, u, v).map(|taps| {
                                Correspondence {
                                    u,
                                    v,
                                    taps,
                                    point,
                                    dpoint_ddepth,
                                }
                            })
                        })
                } else {
                    None
                });
            }
        }
        Self {
            width: w,
            height: h,
            source: *k_source,
            entries,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn entries(&self) -> &[Option<Correspondence>] {
        &self.entries
    }

    pub fn valid_mask(&self) -> Mask {
        Grid::from_vec(
            self.width,
            self.height,
            self.entries.iter().map(Option::is_some).collect(),
        )
        .expect("field dims")
    }

    /// Samples `source` at every correspondence; pixels without one take the
    /// matching `fill` pixel, or black.
    pub fn sample_image(&self, source: &Image, fill: Option<&Image>) -> Image {
        let data = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| match e {
                Some(c) => c.taps.sample(source),
                None => fill.map_or([0.0; 3], |f| f.data()[i]),
            })
            .collect();
        Grid::from_vec(self.width, self.height, data).expect("field dims")
    }

    /// Chain rule from `(dL/du, dL/dv)` at a correspondence to `dL/dpoint`.
    pub fn point_adjoint(&self, c: &Correspondence, g_u: f64, g_v: f64) -> Vector3<f64> {
        let k = &self.source;
        let inv_z = 1.0 / c.point.z;
        let gx = g_u * k.fx * inv_z;
        let gy = g_v * k.fy * inv_z;
        Vector3::new(gx, gy, -(gx * c.point.x + gy * c.point.y) * inv_z)
    }
}

/// Reconstructs the target view by sampling `source` through the target
/// depth. Invalid pixels (behind the source camera or outside its image) are
/// black and flagged false.
pub fn warp_image(
    target_depth: &DepthMap,
    t_target_to_source: &RigidTransform,
    k_target: &Intrinsics,
    k_source: &Intrinsics,
    source: &Image,
) -> (Image, Mask) {
    let field = CorrespondenceField::new(target_depth, t_target_to_source, k_target, k_source);
    (field.sample_image(source, None), field.valid_mask())
}

/// Re-expresses each source pixel's depth in the target camera frame while
/// keeping it on the source grid. Entries that end up at `z <= 0` (or had no
/// valid depth) are stored as 0 and flagged false.
pub fn transform_depth(
    source_depth: &DepthMap,
    t_source_to_target: &RigidTransform,
    k_source: &Intrinsics,
) -> (DepthMap, Mask) {
    let (w, h) = source_depth.dims();
    let z = Grid::from_fn(w, h, |x, y| {
        let d = *source_depth.get(x, y);
        if !depth_is_valid(d) {
            return 0.0;
        }
        let p = t_source_to_target.transform_point(&(k_source.ray(x as f64, y as f64) * d));
        if p.z > 0.0 {
            p.z
        } else {
            0.0
        }
    });
    let valid = z.map(|&v| v > 0.0);
    (z, valid)
}

/// True when every tap of a bilinear sample hits a positive depth.
pub(crate) fn taps_all_valid(taps: &BilinearTaps, depth: &DepthMap) -> bool {
    taps.index.iter().all(|&i| depth.data()[i] > 0.0)
}

/// Dense depth projection: for each target pixel, bilinearly samples the
/// already-transformed source depth at the pixel's source correspondence.
/// Invalid where the correspondence is invalid or any of the four taps holds
/// an invalid (non-positive) transformed depth.
pub fn project_depth_dense(
    target_depth: &DepthMap,
    transformed_source_depth: &DepthMap,
    t_target_to_source: &RigidTransform,
    k_target: &Intrinsics,
    k_source: &Intrinsics,
) -> (DepthMap, Mask) {
    let field = CorrespondenceField::new(target_depth, t_target_to_source, k_target, k_source);
    let (w, h) = field.dims();
    let mut out = DepthMap::filled(w, h, 0.0);
    let mut valid = Mask::filled(w, h, false);
    for (i, e) in field.entries().iter().enumerate() {
        if let Some(c) = e {
            if taps_all_valid(&c.taps, transformed_source_depth) {
                out.data_mut()[i] = c.taps.sample(transformed_source_depth);
                valid.data_mut()[i] = true;
            }
        }
    }
    (out, valid)
}

/// Sparse depth projection: scatters every source pixel into the target
/// grid at its nearest pixel, keeping the smallest depth on collisions.
pub fn forward_warp_depth(
    source_depth: &DepthMap,
    t_source_to_target: &RigidTransform,
    k_source: &Intrinsics,
    k_target: &Intrinsics,
) -> (DepthMap, Mask) {
    let (tw, th) = k_target.dims();
    let mut out = DepthMap::filled(tw, th, f64::INFINITY);
    let mut covered = Mask::filled(tw, th, false);
    for y in 0..source_depth.height() {
        for x in 0..source_depth.width() {
            let d = *source_depth.get(x, y);
            if !depth_is_valid(d) {
                continue;
            }
            let p = t_source_to_target.transform_point(&(k_source.ray(x as f64, y as f64) * d));
            let Some((u, v, z)) = project(&p, k_target) else {
                continue;
            };
            let (ur, vr) = (u.round(), v.round());
            if ur < 0.0 || vr < 0.0 || ur > (tw - 1) as f64 || vr > (th - 1) as f64 {
                continue;
            }
            let i = out.index(ur as usize, vr as usize);
            if z < out.data()[i] {
                out.data_mut()[i] = z;
                covered.data_mut()[i] = true;
            }
        }
    }
    for v in out.data_mut() {
        if !v.is_finite() {
            *v = 0.0;
        }
    }
    (out, covered)
}

/// Pixels of camera `i` whose 3D points (from `depths[i]`) fall inside the
/// frustum of at least one ring neighbour.
pub fn overlap_mask(rig: &CameraRig, depths: &[DepthMap], i: usize) -> Mask {
    let k = rig.intrinsics(i);
    let depth = &depths[i];
    let neighbors: Vec<(RigidTransform, Intrinsics)> = rig
        .neighbors(i)
        .into_iter()
        .map(|j| (rig.relative(i, j), *rig.intrinsics(j)))
        .collect();
    Grid::from_fn(depth.width(), depth.height(), |x, y| {
        let d = *depth.get(x, y);
        if !depth_is_valid(d) {
            return false;
        }
        let p = k.ray(x as f64, y as f64) * d;
        neighbors.iter().any(|(t, kj)| {
            project(&t.transform_point(&p), kj).is_some_and(|(u, v, _)| in_bounds(u, v, kj))
        })
    })
}
