//! Gradient accessors over the loss engine and a seeded central-difference
//! validator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::imaging::DepthMap;
use crate::losses::{
    evaluate, EvalOptions, Evaluation, LossConfig, SurroundBundle, TemporalSource, Term,
    TermWeights,
};
use crate::rig::{exp_se3, Twist};

/// Per-pixel `dL/dD` for one camera.
pub type DepthGradient = DepthMap;

/// `dL/dxi` for a left perturbation `exp(xi) P` of a front pose.
pub type PoseGradient = Twist;

/// A loss evaluated at one depth hypothesis.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub bundle: &'a SurroundBundle,
    pub depths: &'a [DepthMap],
    pub alpha: f64,
    pub weights: TermWeights,
}

impl<'a> LossContext<'a> {
    pub fn new(
        bundle: &'a SurroundBundle,
        depths: &'a [DepthMap],
        config: &LossConfig,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            bundle,
            depths,
            alpha: config.alpha,
            weights: config.weights(),
        })
    }

    pub fn with_weights(self, weights: TermWeights) -> Self {
        Self { weights, ..self }
    }

    pub fn evaluate(&self, gradients: bool) -> Result<Evaluation> {
        evaluate(
            self.bundle,
            self.depths,
            self.alpha,
            &self.weights,
            EvalOptions {
                gradients,
                skip_unweighted: true,
            },
        )
    }

    pub fn total(&self) -> Result<f64> {
        Ok(self.evaluate(false)?.report.total)
    }
}

pub fn loss_grad_depth(ctx: &LossContext, camera: usize) -> Result<DepthGradient> {
    let mut grads = ctx.evaluate(true)?.gradients.expect("gradients requested");
    Ok(grads.depth.swap_remove(camera))
}

pub fn loss_grad_pose(ctx: &LossContext, source: TemporalSource) -> Result<PoseGradient> {
    let grads = ctx.evaluate(true)?.gradients.expect("gradients requested");
    Ok(grads.pose[source as usize])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub step: f64,
    /// Accepted probes wanted.
    pub probes: usize,
    /// Candidates drawn before giving up.
    pub max_attempts: usize,
    pub seed: u64,
    /// Kink screen. A candidate is rejected when either the central
    /// differences at `step` and `2 step` disagree, or the second
    /// differences at those steps depart from their 1:4 ratio, by more than
    /// this amount relative to the derivative. A slope jump `J` anywhere in
    /// `[-2 step, 2 step]` trips one of the two tests once `J` exceeds about
    /// `6.5 * tolerance * |f'|`, bounding its effect on accepted probes.
    pub screen_tolerance: f64,
}

impl FdOptions {
    pub fn new(step: f64, probes: usize, seed: u64) -> Self {
        Self {
            step,
            probes,
            max_attempts: probes * 10,
            seed,
            screen_tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    /// Sparse probe direction.
    pub direction: Vec<(usize, f64)>,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub label: String,
    pub probes: Vec<ProbeResult>,
    pub rejected: usize,
    pub max_relative_error: f64,
}

impl FdReport {
    pub fn passes(&self, tolerance: f64, min_probes: usize) -> bool {
        self.probes.len() >= min_probes && self.max_relative_error < tolerance
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compares `analytic` (the gradient of `f` at `x0`) with central
/// differences along directions drawn by `sample`. The relative-error floor
/// is `1e-6` times the largest analytic component, so components that are
/// numerically zero are compared in absolute terms at that scale.
pub fn finite_diff_check<F, S>(
    label: &str,
    mut f: F,
    x0: &[f64],
    analytic: &[f64],
    mut sample: S,
    options: &FdOptions,
) -> FdReport
where
    F: FnMut(&[f64]) -> f64,
    S: FnMut(&mut ChaCha8Rng) -> Vec<(usize, f64)>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let floor = 1e-6 * analytic.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let mut x = x0.to_vec();
    let mut eval_at = |x: &mut Vec<f64>, dir: &[(usize, f64)], s: f64| -> f64 {
        for &(i, d) in dir {
            x[i] = x0[i] + s * d;
        }
        let v = f(x);
        for &(i, _) in dir {
            x[i] = x0[i];
        }
        v
    };
    let h = options.step;
    let mut probes = Vec::new();
    let mut rejected = 0;
    for _ in 0..options.max_attempts {
        if probes.len() >= options.probes {
            break;
        }
        let dir = sample(&mut rng);
        let f0 = eval_at(&mut x, &dir, 0.0);
        let (p1, m1) = (eval_at(&mut x, &dir, h), eval_at(&mut x, &dir, -h));
        let (p2, m2) = (
            eval_at(&mut x, &dir, 2.0 * h),
            eval_at(&mut x, &dir, -2.0 * h),
        );
        let fd1 = (p1 - m1) / (2.0 * h);
        let fd2 = (p2 - m2) / (4.0 * h);
        let curvature_gap = ((p2 - 2.0 * f0 + m2) - 4.0 * (p1 - 2.0 * f0 + m1)).abs() / h;
        let scale = fd1.abs().max(floor);
        let tol = options.screen_tolerance * scale;
        if !fd1.is_finite() || (fd1 - fd2).abs() > tol || curvature_gap > tol {
            rejected += 1;
            continue;
        }
        let a: f64 = dir.iter().map(|&(i, d)| analytic[i] * d).sum();
        probes.push(ProbeResult {
            relative_error: relative_error(a, fd1, floor),
            direction: dir,
            analytic: a,
            numeric: fd1,
        });
    }
    let max_relative_error = probes.iter().fold(0.0f64, |m, p| m.max(p.relative_error));
    FdReport {
        label: label.to_string(),
        probes,
        rejected,
        max_relative_error,
    }
}

/// Gives every (frame, camera) image its own affine brightness
/// `o + g v` with `o = spacing * (frame + 3 camera)`, so any two images
/// compared by a photometric term differ by at least `spacing` on average.
/// Per-pixel L1 residuals then stay away from zero, where `|x|` has its
/// kink, and gradient probes of pose-dependent terms become meaningful.
pub fn separate_brightness(bundle: &SurroundBundle, spacing: f64) -> Result<SurroundBundle> {
    let n = bundle.rig.len();
    let gain = 1.0 - spacing * (3 * n - 1) as f64;
    if !(spacing > 0.0 && gain >= 0.25) {
        return Err(crate::error::Error::InvalidConfig(format!(
            "brightness spacing {spacing} leaves gain {gain} for {n} cameras"
        )));
    }
    let mut out = bundle.clone();
    for (f, frame) in out.frames.iter_mut().enumerate() {
        for (c, img) in frame.iter_mut().enumerate() {
            let offset = spacing * (f + 3 * c) as f64;
            for px in img.data_mut() {
                for v in px.iter_mut() {
                    *v = offset + gain * *v;
                }
            }
        }
    }
    Ok(out)
}

/// The evaluation point used for gradient checks: the bundle with
/// brightness separated per frame and camera, and depths bent away from
/// `depths` by a smooth few-percent ripple so no residual sits at zero.
pub fn gradcheck_point(
    bundle: &SurroundBundle,
    depths: &[DepthMap],
) -> Result<(SurroundBundle, Vec<DepthMap>)> {
    let bundle = separate_brightness(bundle, 0.04)?;
    let depths = depths
        .iter()
        .enumerate()
        .map(|(i, d)| {
            DepthMap::from_fn(d.width(), d.height(), |x, y| {
                let ripple = 0.03 * (0.3 * x as f64 + i as f64).sin() * (0.2 * y as f64).cos();
                d.get(x, y) * (1.0 + ripple)
            })
        })
        .collect();
    Ok((bundle, depths))
}

/// Settings for [`check_loss_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub depth_step: f64,
    pub pose_step: f64,
    pub probes: usize,
    pub pose_probes: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            depth_step: 1e-3,
            pose_step: 1e-5,
            probes: 200,
            pose_probes: 24,
            seed: 0,
        }
    }
}

fn flatten(depths: &[DepthMap]) -> Vec<f64> {
    depths
        .iter()
        .flat_map(|d| d.data().iter().copied())
        .collect()
}

fn unflatten_into(x: &[f64], depths: &mut [DepthMap]) {
    let mut offset = 0;
    for d in depths {
        let n = d.len();
        d.data_mut().copy_from_slice(&x[offset..offset + n]);
        offset += n;
    }
}

/// Depth probes: half drawn uniformly over all pixels, half over pixels with
/// a non-zero analytic gradient so sparse terms are exercised.
fn depth_sampler(analytic: &[f64]) -> impl FnMut(&mut ChaCha8Rng) -> Vec<(usize, f64)> {
    let support: Vec<usize> = (0..analytic.len())
        .filter(|&i| analytic[i] != 0.0)
        .collect();
    let n = analytic.len();
    let mut k = 0usize;
    move |rng| {
        k += 1;
        let i = if k.is_multiple_of(2) && !support.is_empty() {
            support[rng.random_range(0..support.len())]
        } else {
            rng.random_range(0..n)
        };
        vec![(i, 1.0)]
    }
}

/// Unit directions in the 12-dimensional space of both front-pose twists,
/// cycling through translation-only, rotation-only and mixed.
fn pose_sampler() -> impl FnMut(&mut ChaCha8Rng) -> Vec<(usize, f64)> {
    let mut k = 0usize;
    move |rng| {
        let kind = k % 3;
        k += 1;
        let mut v: Vec<f64> = (0..12)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        for (i, c) in v.iter_mut().enumerate() {
            let rotational = i % 6 >= 3;
            if (kind == 0 && rotational) || (kind == 1 && !rotational) {
                *c = 0.0;
            }
        }
        let norm = v.iter().map(|c| c * c).sum::<f64>().sqrt();
        v.iter().enumerate().map(|(i, c)| (i, c / norm)).collect()
    }
}

/// Validates the depth gradient of `weights`-weighted loss and, when it
/// depends on the temporal poses, the pose gradient.
pub fn check_weighted(
    label: &str,
    bundle: &SurroundBundle,
    depths: &[DepthMap],
    alpha: f64,
    weights: TermWeights,
    options: &GradcheckOptions,
) -> Result<Vec<FdReport>> {
    let ctx = LossContext {
        bundle,
        depths,
        alpha,
        weights,
    };
    let grads = ctx.evaluate(true)?.gradients.expect("gradients requested");
    let x0 = flatten(depths);
    let analytic = flatten(&grads.depth);
    let mut scratch = depths.to_vec();
    let depth_report = finite_diff_check(
        &format!("{label} depth"),
        |x| {
            unflatten_into(x, &mut scratch);
            LossContext {
                depths: &scratch,
                ..ctx
            }
            .total()
            .unwrap_or(f64::NAN)
        },
        &x0,
        &analytic,
        depth_sampler(&analytic),
        &FdOptions::new(options.depth_step, options.probes, options.seed),
    );
    let mut reports = vec![depth_report];

    let pose_dependent = [Term::Temporal, Term::SpatioTemporal, Term::Mvrcl]
        .iter()
        .any(|t| weights.get(*t) != 0.0);
    if pose_dependent {
        let analytic: Vec<f64> = grads.pose.iter().flat_map(|g| g.iter().copied()).collect();
        let mut perturbed = bundle.clone();
        let pose_report = finite_diff_check(
            &format!("{label} pose"),
            |x| {
                for (s, p) in perturbed.front_poses.iter_mut().enumerate() {
                    let xi = Twist::from_column_slice(&x[6 * s..6 * s + 6]);
                    *p = exp_se3(&xi) * bundle.front_poses[s];
                }
                LossContext {
                    bundle: &perturbed,
                    ..ctx
                }
                .total()
                .unwrap_or(f64::NAN)
            },
            &[0.0; 12],
            &analytic,
            pose_sampler(),
            &FdOptions {
                // most random pose directions cross some L1 kink
                max_attempts: options.pose_probes * 60,
                ..FdOptions::new(
                    options.pose_step,
                    options.pose_probes,
                    options.seed ^ 0x5eed,
                )
            },
        );
        reports.push(pose_report);
    }
    Ok(reports)
}

/// Runs [`check_weighted`] for every term in isolation (unit weight).
pub fn check_loss_gradients(
    bundle: &SurroundBundle,
    depths: &[DepthMap],
    alpha: f64,
    options: &GradcheckOptions,
) -> Result<Vec<FdReport>> {
    let mut out = Vec::new();
    for term in Term::ALL {
        out.extend(check_weighted(
            term.name(),
            bundle,
            depths,
            alpha,
            TermWeights::only(term),
            options,
        )?);
    }
    Ok(out)
}

/// Gradcheck rows as TOML: label, probe count, rejected count and the
/// maximum relative error.
pub fn reports_to_toml(reports: &[FdReport], tolerance: f64) -> String {
    #[derive(serde::Serialize)]
    struct Row<'a> {
        term: &'a str,
        probes: usize,
        rejected: usize,
        max_relative_error: f64,
        pass: bool,
    }
    #[derive(serde::Serialize)]
    struct Doc<'a> {
        tolerance: f64,
        check: Vec<Row<'a>>,
    }
    let doc = Doc {
        tolerance,
        check: reports
            .iter()
            .map(|r| Row {
                term: &r.label,
                probes: r.probes.len(),
                rejected: r.rejected,
                max_relative_error: r.max_relative_error,
                pass: r.max_relative_error < tolerance,
            })
            .collect(),
    };
    toml::to_string(&doc).expect("gradcheck report serializes")
}
