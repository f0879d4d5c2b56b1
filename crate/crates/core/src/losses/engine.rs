//! Forward evaluation of every loss term together with the reverse-mode
//! pass back to the depth maps at time `t` and the two front-camera poses.
//!
//! Pose gradients are taken with respect to a left perturbation of the
//! front-camera pose, `P -> exp(delta) P`. Each warp whose transform depends
//! on a front pose factors as `A exp(delta) B`, so with `Z = B X` and
//! `Y = A Z` the chain rule gives `dL/drho = A_R^T dL/dY` and
//! `dL/domega = Z x (A_R^T dL/dY)`.

use nalgebra::Vector3;

use super::ssim::{ssim_backward, ssim_channels};
use super::{LossReport, PairReport, SurroundBundle, TemporalSource, Term, TermValue, TermWeights};
use crate::error::{Error, Result};
use crate::imaging::{DepthMap, Grid, Image, Mask, Rgb};
use crate::rig::{CameraRig, RigidTransform, Twist};
use crate::warp::{taps_all_valid, CorrespondenceField};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Run the reverse pass.
    pub gradients: bool,
    /// Skip terms whose weight is zero; their report entries stay empty.
    pub skip_unweighted: bool,
}

/// Gradients of the weighted total.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// One grid per camera, with respect to the depth at time `t`.
    pub depth: Vec<DepthMap>,
    /// With respect to the left-perturbation twist of each front pose,
    /// indexed by [`TemporalSource`].
    pub pose: [Twist; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: LossReport,
    pub gradients: Option<Gradients>,
}

pub(crate) fn check_depths(depths: &[DepthMap], rig: &CameraRig) -> Result<()> {
    if depths.len() != rig.len() {
        return Err(Error::InvalidConfig(format!(
            "{} depth maps for a {}-camera rig",
            depths.len(),
            rig.len()
        )));
    }
    for (i, d) in depths.iter().enumerate() {
        d.ensure_dims(rig.intrinsics(i).dims())?;
        if let Some(v) = d.data().iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidGrid(format!(
                "camera {i}: depth {v} is not finite and positive"
            )));
        }
    }
    Ok(())
}

/// Gradients of a photometric mean with respect to both images.
type ImagePairGrad = (Vec<Rgb>, Vec<Rgb>);

/// Photometric error of `b` against `a` over `mask`, with optional
/// gradients (of the mean) with respect to both images.
pub(crate) fn photometric(
    a: &Image,
    b: &Image,
    mask: &Mask,
    alpha: f64,
    want_grad: bool,
) -> (TermValue, Option<ImagePairGrad>) {
    let n = mask.count();
    if n == 0 {
        return (TermValue::default(), None);
    }
    let ssim = (alpha > 0.0).then(|| ssim_channels(a, b));
    let (ad, bd, md) = (a.data(), b.data(), mask.data());
    let mut sum = 0.0;
    for p in 0..ad.len() {
        if !md[p] {
            continue;
        }
        let l1: f64 = (0..3).map(|c| (ad[p][c] - bd[p][c]).abs()).sum::<f64>() / 3.0;
        let dssim = ssim.as_ref().map_or(0.0, |s| {
            (0..3).map(|c| (1.0 - s[p][c].value) / 2.0).sum::<f64>() / 3.0
        });
        sum += (1.0 - alpha) * l1 + alpha * dssim;
    }
    let value = TermValue {
        value: sum / n as f64,
        pixels: n,
        groups: 1,
    };
    if !want_grad {
        return (value, None);
    }
    let inv_n = 1.0 / n as f64;
    let mut ga = vec![[0.0; 3]; ad.len()];
    let mut gb = vec![[0.0; 3]; ad.len()];
    let mut upstream = vec![[0.0; 3]; ad.len()];
    let l1_scale = (1.0 - alpha) * inv_n / 3.0;
    let ssim_scale = -alpha * inv_n / 6.0;
    for p in 0..ad.len() {
        if !md[p] {
            continue;
        }
        for c in 0..3 {
            let d = ad[p][c] - bd[p][c];
            // subgradient of |d| at 0 is 0
            let s = if d > 0.0 {
                1.0
            } else if d < 0.0 {
                -1.0
            } else {
                0.0
            };
            ga[p][c] += l1_scale * s;
            gb[p][c] -= l1_scale * s;
            upstream[p][c] = ssim_scale;
        }
    }
    if let Some(s) = &ssim {
        ssim_backward(a, b, s, &upstream, Some(&mut ga), Some(&mut gb));
    }
    (value, Some((ga, gb)))
}

/// Smoothness value; with `grad = Some((g, scale))` adds `scale * dL/dD`
/// into `g`.
pub(crate) fn smoothness(depth: &DepthMap, img: &Image, grad: Option<(&mut [f64], f64)>) -> f64 {
    let (w, h) = depth.dims();
    let n = (w * h) as f64;
    let d = depth.data();
    let mean = d.iter().sum::<f64>() / n;
    let inv_mean = 1.0 / mean;
    let edge = |p: usize, q: usize| -> f64 {
        let (a, b) = (img.data()[p], img.data()[q]);
        let g = ((a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()) / 3.0;
        (-g).exp()
    };
    let nx = (w.saturating_sub(1) * h) as f64;
    let ny = (w * h.saturating_sub(1)) as f64;
    // (p, q, weight / count) for each forward difference d*(q) - d*(p)
    let mut pairs = Vec::with_capacity(2 * w * h);
    if nx > 0.0 {
        for y in 0..h {
            for x in 0..w - 1 {
                let p = y * w + x;
                pairs.push((p, p + 1, edge(p, p + 1) / nx));
            }
        }
    }
    if ny > 0.0 {
        for y in 0..h - 1 {
            for x in 0..w {
                let p = y * w + x;
                pairs.push((p, p + w, edge(p, p + w) / ny));
            }
        }
    }
    let mut value = 0.0;
    for &(p, q, k) in &pairs {
        value += k * ((d[q] - d[p]) * inv_mean).abs();
    }
    if let Some((g, scale)) = grad {
        // gradient with respect to the normalized depth d* = D / mean
        let mut g_star = vec![0.0; d.len()];
        for &(p, q, k) in &pairs {
            let diff = d[q] - d[p];
            let s = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            g_star[q] += k * s;
            g_star[p] -= k * s;
        }
        let coupling: f64 =
            g_star.iter().zip(d).map(|(gs, dv)| gs * dv).sum::<f64>() * inv_mean * inv_mean / n;
        for (gi, gs) in g.iter_mut().zip(&g_star) {
            *gi += scale * (gs * inv_mean - coupling);
        }
    }
    value
}

struct PairEntry {
    pixel: usize,
    corr: crate::warp::Correspondence,
    diff: f64,
}

/// Dense depth consistency over ordered ring-neighbour pairs. With `grad`,
/// adds `weight * dL/dD` into the per-camera gradient buffers.
pub(crate) fn ddcl(
    depths: &[DepthMap],
    rig: &CameraRig,
    weight: f64,
    grad: Option<&mut [Vec<f64>]>,
) -> (TermValue, Vec<PairReport>) {
    struct PairData {
        target: usize,
        source: usize,
        field: CorrespondenceField,
        transformed: DepthMap,
        dz: Vec<f64>,
        entries: Vec<PairEntry>,
    }
    let mut data = Vec::new();
    let mut reports = Vec::new();
    for (i, j) in rig.neighbor_pairs() {
        let (ki, kj) = (rig.intrinsics(i), rig.intrinsics(j));
        let source_to_target = rig.relative(j, i);
        let (w, h) = depths[j].dims();
        let mut dz = vec![0.0; w * h];
        let transformed = Grid::from_fn(w, h, |x, y| {
            let rr = source_to_target.rotation * kj.ray(x as f64, y as f64);
            let z = depths[j].get(x, y) * rr.z + source_to_target.translation.z;
            dz[y * w + x] = rr.z;
            if z > 0.0 {
                z
            } else {
                0.0
            }
        });
        let field = CorrespondenceField::new(&depths[i], &rig.relative(i, j), ki, kj);
        let mut entries = Vec::new();
        let mut sum = 0.0;
        for (p, e) in field.entries().iter().enumerate() {
            if let Some(c) = e {
                if taps_all_valid(&c.taps, &transformed) {
                    let diff = depths[i].data()[p] - c.taps.sample(&transformed);
                    sum += diff.abs();
                    entries.push(PairEntry {
                        pixel: p,
                        corr: *c,
                        diff,
                    });
                }
            }
        }
        let pixels = entries.len();
        reports.push(PairReport {
            target: i,
            source: j,
            value: if pixels > 0 { sum / pixels as f64 } else { 0.0 },
            pixels,
        });
        data.push(PairData {
            target: i,
            source: j,
            field,
            transformed,
            dz,
            entries,
        });
    }
    let nonempty: Vec<&PairReport> = reports.iter().filter(|r| r.pixels > 0).collect();
    let groups = nonempty.len();
    let value = if groups > 0 {
        TermValue {
            value: nonempty.iter().map(|r| r.value).sum::<f64>() / groups as f64,
            pixels: nonempty.iter().map(|r| r.pixels).sum(),
            groups,
        }
    } else {
        TermValue::default()
    };
    if let Some(g) = grad {
        for pair in data.iter().filter(|p| !p.entries.is_empty()) {
            let scale = weight / (groups as f64 * pair.entries.len() as f64);
            for e in &pair.entries {
                if e.diff == 0.0 {
                    continue;
                }
                let s = scale * e.diff.signum();
                let c = &e.corr;
                let (gz_u, gz_v) = c.taps.gradient(&pair.transformed);
                let gy = pair.field.point_adjoint(c, -s * gz_u, -s * gz_v);
                g[pair.target][e.pixel] += s + gy.dot(&c.dpoint_ddepth);
                for k in 0..4 {
                    let q = c.taps.index[k];
                    g[pair.source][q] -= s * c.taps.weight[k] * pair.dz[q];
                }
            }
        }
    }
    (value, reports)
}

/// One backward warp of a target view from a source image.
struct Route<'a> {
    camera: usize,
    source: &'a Image,
    field: CorrespondenceField,
    recon: Image,
    valid: Mask,
    /// `(which front pose, A, A^-1)` when the transform is `A exp(delta) B`.
    pose: Option<(TemporalSource, RigidTransform, RigidTransform)>,
    grad: Option<Vec<Rgb>>,
}

impl Route<'_> {
    fn add_grad(&mut self, g: &[Rgb], scale: f64) {
        let buf = self.grad.get_or_insert_with(|| vec![[0.0; 3]; g.len()]);
        for (acc, v) in buf.iter_mut().zip(g) {
            for c in 0..3 {
                acc[c] += scale * v[c];
            }
        }
    }
}

/// Means the per-route values over routes with a non-empty mask.
fn combine(values: &[TermValue]) -> TermValue {
    let nonempty: Vec<&TermValue> = values.iter().filter(|v| v.pixels > 0).collect();
    if nonempty.is_empty() {
        return TermValue::default();
    }
    TermValue {
        value: nonempty.iter().map(|v| v.value).sum::<f64>() / nonempty.len() as f64,
        pixels: nonempty.iter().map(|v| v.pixels).sum(),
        groups: nonempty.len(),
    }
}

/// Evaluates the loss terms at `depths` (one map per camera at time `t`)
/// and, when requested, the gradients of `sum_k weights[k] * L_k`.
pub fn evaluate<'b>(
    bundle: &'b SurroundBundle,
    depths: &[DepthMap],
    alpha: f64,
    weights: &TermWeights,
    options: EvalOptions,
) -> Result<Evaluation> {
    let rig = &bundle.rig;
    bundle.validate()?;
    check_depths(depths, rig)?;
    let n = rig.len();
    let needed = |term: Term| !options.skip_unweighted || weights.get(term) != 0.0;
    let need_t = needed(Term::Temporal);
    let need_mv = needed(Term::Mvrcl);
    let need_s = needed(Term::Spatial) || need_mv;
    let need_st = needed(Term::SpatioTemporal) || need_mv;
    let grad_of = |term: Term| options.gradients && weights.get(term) != 0.0;

    let targets = bundle.target_images();
    let e0 = rig.extrinsic(0);
    let mut routes: Vec<Route<'b>> = Vec::new();
    let mut temporal_ix = vec![[usize::MAX; 2]; n];
    let mut spatial_ix: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut st_ix: Vec<Vec<[usize; 2]>> = vec![Vec::new(); n];

    for i in 0..n {
        let ei = rig.extrinsic(i);
        let ki = rig.intrinsics(i);
        let neighbors = rig.neighbors(i);
        for tau in TemporalSource::BOTH {
            let inner = *bundle.front_pose(tau) * e0.inverse() * *ei;
            let push = |j: usize, routes: &mut Vec<Route<'b>>| -> usize {
                let outer = rig.extrinsic(j).inverse() * *e0;
                let t = outer * inner;
                let source = &bundle.frames[tau.frame_index()][j];
                let field = CorrespondenceField::new(&depths[i], &t, ki, rig.intrinsics(j));
                let recon = field.sample_image(source, Some(&targets[i]));
                let valid = field.valid_mask();
                routes.push(Route {
                    camera: i,
                    source,
                    field,
                    recon,
                    valid,
                    pose: Some((tau, outer, outer.inverse())),
                    grad: None,
                });
                routes.len() - 1
            };
            if need_t {
                temporal_ix[i][tau as usize] = push(i, &mut routes);
            }
            if need_st {
                for (k, &j) in neighbors.iter().enumerate() {
                    if st_ix[i].len() <= k {
                        st_ix[i].push([usize::MAX; 2]);
                    }
                    st_ix[i][k][tau as usize] = push(j, &mut routes);
                }
            }
        }
        if need_s {
            for &j in &neighbors {
                let t = rig.relative(i, j);
                let source = &targets[j];
                let field = CorrespondenceField::new(&depths[i], &t, ki, rig.intrinsics(j));
                let recon = field.sample_image(source, Some(&targets[i]));
                let valid = field.valid_mask();
                routes.push(Route {
                    camera: i,
                    source,
                    field,
                    recon,
                    valid,
                    pose: None,
                    grad: None,
                });
                spatial_ix[i].push(routes.len() - 1);
            }
        }
    }

    let mut report = LossReport::default();

    // Photometric reconstruction terms against the target image.
    let mut reconstruction_term = |term: Term, ix: Vec<usize>, routes: &mut Vec<Route>| {
        let want = grad_of(term);
        let results: Vec<(TermValue, Option<ImagePairGrad>)> = ix
            .iter()
            .map(|&r| {
                let route = &routes[r];
                photometric(
                    &targets[route.camera],
                    &route.recon,
                    &route.valid,
                    alpha,
                    want,
                )
            })
            .collect();
        let values: Vec<TermValue> = results.iter().map(|r| r.0).collect();
        let combined = combine(&values);
        if want && combined.groups > 0 {
            let scale = weights.get(term) / combined.groups as f64;
            for (&r, (_, g)) in ix.iter().zip(&results) {
                if let Some((_, gb)) = g {
                    routes[r].add_grad(gb, scale);
                }
            }
        }
        *report.term_mut(term) = combined;
    };
    if needed(Term::Temporal) {
        let ix = temporal_ix.iter().flatten().copied().collect();
        reconstruction_term(Term::Temporal, ix, &mut routes);
    }
    if needed(Term::Spatial) {
        let ix = spatial_ix.iter().flatten().copied().collect();
        reconstruction_term(Term::Spatial, ix, &mut routes);
    }
    if needed(Term::SpatioTemporal) {
        let ix = st_ix.iter().flatten().flatten().copied().collect();
        reconstruction_term(Term::SpatioTemporal, ix, &mut routes);
    }

    if need_mv {
        let want = grad_of(Term::Mvrcl);
        let mut results = Vec::new();
        for i in 0..n {
            for (k, &rs) in spatial_ix[i].iter().enumerate() {
                for &rst in &st_ix[i][k] {
                    let (a, b) = (&routes[rs], &routes[rst]);
                    let mask = a.valid.and(&b.valid);
                    let (v, g) = photometric(&a.recon, &b.recon, &mask, alpha, want);
                    results.push((rs, rst, v, g));
                }
            }
        }
        let values: Vec<TermValue> = results.iter().map(|r| r.2).collect();
        let combined = combine(&values);
        if want && combined.groups > 0 {
            let scale = weights.mvrcl / combined.groups as f64;
            for (rs, rst, _, g) in &results {
                if let Some((ga, gb)) = g {
                    routes[*rs].add_grad(ga, scale);
                    routes[*rst].add_grad(gb, scale);
                }
            }
        }
        report.mvrcl = combined;
    }

    let mut depth_grad: Vec<Vec<f64>> = depths.iter().map(|d| vec![0.0; d.len()]).collect();
    let mut pose_grad = [Twist::zeros(); 2];

    if needed(Term::Smoothness) {
        let want = grad_of(Term::Smoothness);
        let scale = weights.smoothness / n as f64;
        let mut sum = 0.0;
        for i in 0..n {
            let g = want.then(|| (depth_grad[i].as_mut_slice(), scale));
            sum += smoothness(&depths[i], &targets[i], g);
        }
        report.smoothness = TermValue {
            value: sum / n as f64,
            pixels: depths.iter().map(|d| d.len()).sum(),
            groups: n,
        };
    }

    if needed(Term::Ddcl) {
        let g = grad_of(Term::Ddcl).then_some(depth_grad.as_mut_slice());
        report.ddcl = ddcl(depths, rig, weights.ddcl, g).0;
    }

    report.total = report.recombine(weights);

    if !options.gradients {
        return Ok(Evaluation {
            report,
            gradients: None,
        });
    }

    for route in &routes {
        let Some(g) = &route.grad else { continue };
        let dg = &mut depth_grad[route.camera];
        for (p, entry) in route.field.entries().iter().enumerate() {
            let Some(c) = entry else { continue };
            let gp = g[p];
            if gp == [0.0; 3] {
                continue;
            }
            let (di_du, di_dv) = c.taps.gradient(route.source);
            let g_u = gp[0] * di_du[0] + gp[1] * di_du[1] + gp[2] * di_du[2];
            let g_v = gp[0] * di_dv[0] + gp[1] * di_dv[1] + gp[2] * di_dv[2];
            let gy = route.field.point_adjoint(c, g_u, g_v);
            dg[p] += gy.dot(&c.dpoint_ddepth);
            if let Some((tau, outer, outer_inv)) = &route.pose {
                let g_inner: Vector3<f64> = outer.rotation.transpose() * gy;
                let z = outer_inv.transform_point(&c.point);
                let g_rot = z.cross(&g_inner);
                let pg = &mut pose_grad[*tau as usize];
                for k in 0..3 {
                    pg[k] += g_inner[k];
                    pg[k + 3] += g_rot[k];
                }
            }
        }
    }

    let depth = depth_grad
        .into_iter()
        .zip(depths)
        .map(|(g, d)| Grid::from_vec(d.width(), d.height(), g).expect("depth dims"))
        .collect();
    Ok(Evaluation {
        report,
        gradients: Some(Gradients {
            depth,
            pose: pose_grad,
        }),
    })
}
