//! Depth (and front-pose) recovery by adaptive gradient descent on the full
//! loss, with the flip-and-map-back augmentation path.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{depth_metrics, median_ratio, median_scale};
use crate::imaging::{DepthMap, Grid, Mask};
use crate::losses::{
    evaluate, EvalOptions, LossConfig, LossReport, SurroundBundle, Term, TermWeights,
};
use crate::rig::{exp_se3, flip_twist, RigidTransform, Twist};
use crate::synth::Sequence;

/// Which optional loss terms take part; the temporal term always does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TermSwitches {
    pub spatial: bool,
    pub spatiotemporal: bool,
    pub smoothness: bool,
    pub ddcl: bool,
    pub mvrcl: bool,
}

impl Default for TermSwitches {
    fn default() -> Self {
        Self {
            spatial: true,
            spatiotemporal: true,
            smoothness: true,
            ddcl: true,
            mvrcl: true,
        }
    }
}

impl TermSwitches {
    /// Only frame-to-frame supervision: no term that looks through the
    /// extrinsics.
    pub fn temporal_only() -> Self {
        Self {
            spatial: false,
            spatiotemporal: false,
            smoothness: true,
            ddcl: false,
            mvrcl: false,
        }
    }

    /// Enables or disables `term`; the temporal term cannot be disabled.
    pub fn set(&mut self, term: Term, on: bool) -> Result<()> {
        match term {
            Term::Temporal => {
                if !on {
                    return Err(Error::InvalidConfig(
                        "the temporal term cannot be disabled".into(),
                    ));
                }
            }
            Term::Spatial => self.spatial = on,
            Term::SpatioTemporal => self.spatiotemporal = on,
            Term::Smoothness => self.smoothness = on,
            Term::Ddcl => self.ddcl = on,
            Term::Mvrcl => self.mvrcl = on,
        }
        Ok(())
    }

    pub fn is_enabled(&self, term: Term) -> bool {
        match term {
            Term::Temporal => true,
            Term::Spatial => self.spatial,
            Term::SpatioTemporal => self.spatiotemporal,
            Term::Smoothness => self.smoothness,
            Term::Ddcl => self.ddcl,
            Term::Mvrcl => self.mvrcl,
        }
    }

    /// The configured weights with disabled terms zeroed.
    pub fn weights(&self, loss: &LossConfig) -> TermWeights {
        let mut w = loss.weights();
        for t in Term::ALL {
            if !self.is_enabled(t) {
                *w.get_mut(t) = 0.0;
            }
        }
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Step size for log-depth parameters.
    pub learning_rate: f64,
    /// Step size for the translational part of the pose twists (meters).
    pub pose_learning_rate: f64,
    /// Step size for the rotational part of the pose twists (radians).
    pub rotation_learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub iterations: usize,
    /// Steps over which every step size ramps up linearly from zero.
    pub warmup_iterations: usize,
    /// Anneal every step size to zero at `iterations` along a half cosine.
    pub cosine_decay: bool,
    pub terms: TermSwitches,
    pub optimize_pose: bool,
    /// Chance that an iteration runs through the flipped bundle.
    pub hflip_prob: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            pose_learning_rate: 1e-4,
            rotation_learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            iterations: 2000,
            warmup_iterations: 0,
            cosine_decay: false,
            terms: TermSwitches::default(),
            optimize_pose: true,
            hflip_prob: 0.5,
            seed: 0,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::InvalidConfig(what));
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("pose_learning_rate", self.pose_learning_rate),
            ("rotation_learning_rate", self.rotation_learning_rate),
            ("epsilon", self.epsilon),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return bad(format!(
                "hflip_prob must be in [0, 1], got {}",
                self.hflip_prob
            ));
        }
        Ok(())
    }

    /// Step-size multiplier for the 1-based step `t`.
    pub fn schedule(&self, t: u64) -> f64 {
        let t = t as f64;
        let mut s = 1.0;
        if self.warmup_iterations > 0 {
            s *= (t / self.warmup_iterations as f64).min(1.0);
        }
        if self.cosine_decay && self.iterations > 0 {
            let progress = ((t - 1.0) / self.iterations as f64).clamp(0.0, 1.0);
            s *= 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        }
        s
    }
}

/// Adam moment pair for a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self {
            first: vec![0.0; n],
            second: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update of `params` in place; `t` counts updates
/// from 1.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut Moments,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) {
    debug_assert!(t >= 1);
    let c1 = 1.0 - beta1.powf(t as f64);
    let c2 = 1.0 - beta2.powf(t as f64);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(moments.first.iter_mut())
        .zip(moments.second.iter_mut())
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
    }
}

/// Gradient with respect to the parameters of an [`OptimState`].
#[derive(Debug, Clone, PartialEq)]
pub struct StateGradient {
    /// `dL/d log D` per camera.
    pub log_depth: Vec<DepthMap>,
    /// `dL/dxi` for left perturbations of each front pose.
    pub pose: [Twist; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    /// Log-depth (log meters) per camera.
    pub log_depth: Vec<DepthMap>,
    /// Current front-pose estimates, indexed by temporal source.
    pub poses: [RigidTransform; 2],
    pub step: u64,
    pub depth_moments: Vec<Moments>,
    pub pose_moments: [Moments; 2],
}

impl OptimState {
    pub fn new(depths: &[DepthMap], poses: [RigidTransform; 2]) -> Result<Self> {
        for (i, d) in depths.iter().enumerate() {
            if let Some(v) = d.data().iter().find(|v| !(v.is_finite() && **v > 0.0)) {
                return Err(Error::InvalidGrid(format!(
                    "initial depth of camera {i} must be positive and finite, found {v}"
                )));
            }
        }
        Ok(Self {
            log_depth: depths.iter().map(|d| d.map(|v| v.ln())).collect(),
            poses,
            step: 0,
            depth_moments: depths.iter().map(|d| Moments::zeros(d.len())).collect(),
            pose_moments: [Moments::zeros(6), Moments::zeros(6)],
        })
    }

    pub fn depths(&self) -> Vec<DepthMap> {
        self.log_depth.iter().map(|l| l.map(|v| v.exp())).collect()
    }

    /// Advances every parameter by one Adam step. Poses move on the
    /// manifold: `P <- exp(delta) P` where `delta` is the Adam update of a
    /// zero twist (the update is linear in the step size, so translation and
    /// rotation are scaled separately).
    pub fn adam_step(&mut self, grads: &StateGradient, config: &OptimConfig) -> Result<()> {
        if grads.log_depth.len() != self.log_depth.len() {
            return Err(Error::InvalidConfig(format!(
                "gradient has {} depth maps, state has {}",
                grads.log_depth.len(),
                self.log_depth.len()
            )));
        }
        for (g, p) in grads.log_depth.iter().zip(&self.log_depth) {
            g.ensure_dims(p.dims())?;
        }
        self.step += 1;
        let (b1, b2, eps) = (config.beta1, config.beta2, config.epsilon);
        let scale = config.schedule(self.step);
        for ((p, g), m) in self
            .log_depth
            .iter_mut()
            .zip(&grads.log_depth)
            .zip(&mut self.depth_moments)
        {
            adam_update(
                p.data_mut(),
                g.data(),
                m,
                self.step,
                scale * config.learning_rate,
                b1,
                b2,
                eps,
            );
        }
        if config.optimize_pose {
            for s in 0..2 {
                let mut delta = [0.0; 6];
                adam_update(
                    &mut delta,
                    grads.pose[s].as_slice(),
                    &mut self.pose_moments[s],
                    self.step,
                    1.0,
                    b1,
                    b2,
                    eps,
                );
                for (k, d) in delta.iter_mut().enumerate() {
                    *d *= scale
                        * if k < 3 {
                            config.pose_learning_rate
                        } else {
                            config.rotation_learning_rate
                        };
                }
                self.poses[s] = exp_se3(&Twist::from_column_slice(&delta)) * self.poses[s];
            }
        }
        Ok(())
    }
}

/// Evaluates the loss and gradients on the flipped bundle with mirrored
/// depths, then maps the gradients back onto the unflipped parameters.
/// The returned report belongs to the flipped evaluation.
pub fn hflip_s_evaluate(
    bundle: &SurroundBundle,
    depths: &[DepthMap],
    alpha: f64,
    weights: &TermWeights,
) -> Result<(LossReport, Vec<DepthMap>, [Twist; 2])> {
    let flipped = bundle.hflip();
    let flipped_depths: Vec<DepthMap> = depths.iter().map(Grid::hflip).collect();
    let eval = evaluate(
        &flipped,
        &flipped_depths,
        alpha,
        weights,
        EvalOptions {
            gradients: true,
            skip_unweighted: true,
        },
    )?;
    let g = eval.gradients.expect("gradients requested");
    // flip_pose(exp(xi) P) = exp(flip_twist(xi)) flip_pose(P), and
    // flip_twist is its own transpose
    Ok((
        eval.report,
        g.depth.iter().map(Grid::hflip).collect(),
        [flip_twist(&g.pose[0]), flip_twist(&g.pose[1])],
    ))
}

/// Starting point of a recovery run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Initialization {
    /// Multiplier on ground-truth depth.
    pub depth_scale: f64,
    /// Standard deviation of i.i.d. Gaussian noise added to log-depth.
    pub log_depth_noise: f64,
    /// Multiplier on the ground-truth pose translations.
    pub pose_translation_scale: f64,
}

impl Default for Initialization {
    fn default() -> Self {
        Self {
            depth_scale: 1.0,
            log_depth_noise: 0.0,
            pose_translation_scale: 1.0,
        }
    }
}

/// Per-iteration record, taken before the update.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub flipped: bool,
    pub total: f64,
    /// Unweighted value per term in [`Term::ALL`] order; 0 for disabled
    /// terms.
    pub terms: [f64; 6],
    /// Lower median of `pred / gt` over all valid pixels.
    pub median_ratio: f64,
    pub abs_rel: f64,
    /// Abs Rel after per-frame median scaling.
    pub abs_rel_scaled: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    pub depths: Vec<DepthMap>,
    pub poses: [RigidTransform; 2],
    pub history: Vec<HistoryRow>,
    /// The record of the final parameters (iteration = number of updates).
    pub last: HistoryRow,
}

/// All pixels of all cameras as one long grid, so metrics pool them.
fn pooled<T: Clone>(grids: &[Grid<T>]) -> Result<Grid<T>> {
    let data: Vec<T> = grids
        .iter()
        .flat_map(|g| g.data().iter().cloned())
        .collect();
    let n = data.len();
    Grid::from_vec(n, 1, data)
}

/// Ground truth and its validity for the center frame.
struct Truth {
    depth: DepthMap,
    mask: Mask,
}

fn record(
    iteration: usize,
    flipped: bool,
    report: &LossReport,
    depths: &[DepthMap],
    truth: &Truth,
    cap: f64,
) -> Result<HistoryRow> {
    let pred = pooled(depths)?;
    let ratio = median_ratio(
        std::slice::from_ref(&pred),
        std::slice::from_ref(&truth.depth),
        std::slice::from_ref(&truth.mask),
    )?;
    let raw = depth_metrics(&pred, &truth.depth, &truth.mask, cap)?;
    let (scaled, _) = median_scale(&pred, &truth.depth, &truth.mask)?;
    let scaled = depth_metrics(&scaled, &truth.depth, &truth.mask, cap)?;
    let mut terms = [0.0; 6];
    for (v, t) in terms.iter_mut().zip(Term::ALL) {
        *v = report.term(t).value;
    }
    Ok(HistoryRow {
        iteration,
        flipped,
        total: report.total,
        terms,
        median_ratio: ratio,
        abs_rel: raw.abs_rel,
        abs_rel_scaled: scaled.abs_rel,
    })
}

/// Initial depths: scaled ground truth, with the median valid depth filling
/// pixels that see nothing, times log-normal noise.
pub fn initial_depths(
    gt: &[DepthMap],
    valid: &[Mask],
    init: &Initialization,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DepthMap>> {
    if !(init.depth_scale.is_finite() && init.depth_scale > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "depth_scale must be positive, got {}",
            init.depth_scale
        )));
    }
    let mut fill: Vec<f64> = gt
        .iter()
        .zip(valid)
        .flat_map(|(d, m)| {
            d.data()
                .iter()
                .zip(m.data())
                .filter(|(_, &m)| m)
                .map(|(&d, _)| d)
        })
        .collect();
    let fill = crate::eval::lower_median(&mut fill).ok_or(Error::EmptyMask)?;
    Ok(gt
        .iter()
        .zip(valid)
        .map(|(d, m)| {
            Grid::from_fn(d.width(), d.height(), |x, y| {
                let base = if *m.get(x, y) { *d.get(x, y) } else { fill };
                let noise = if init.log_depth_noise > 0.0 {
                    init.log_depth_noise * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                base * init.depth_scale * noise.exp()
            })
        })
        .collect())
}

/// Recovers the depth of every camera at step `center` of `sequence`.
/// Metrics are scored against the rendered ground truth capped at `cap`.
pub fn recover_depth(
    sequence: &Sequence,
    center: usize,
    loss: &LossConfig,
    config: &OptimConfig,
    init: &Initialization,
    cap: f64,
) -> Result<Recovery> {
    loss.validate()?;
    config.validate()?;
    if sequence.steps() < 3 {
        return Err(Error::InvalidConfig(format!(
            "recovery needs at least 3 steps, got {}",
            sequence.steps()
        )));
    }
    let mut bundle = sequence.bundle(center)?;
    let gt = sequence.depths(center);
    let valid = sequence.valid_masks(center);
    let truth = Truth {
        depth: pooled(&gt)?,
        mask: pooled(&valid)?,
    };
    let weights = config.terms.weights(loss);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let depths0 = initial_depths(&gt, &valid, init, &mut rng)?;
    let poses0 = [
        bundle.front_poses[0].with_scaled_translation(init.pose_translation_scale),
        bundle.front_poses[1].with_scaled_translation(init.pose_translation_scale),
    ];
    let mut state = OptimState::new(&depths0, poses0)?;
    let mut history = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        bundle.front_poses = state.poses;
        let depths = state.depths();
        let flipped = config.hflip_prob > 0.0 && rng.random::<f64>() < config.hflip_prob;
        let (report, depth_grad, pose) = if flipped {
            hflip_s_evaluate(&bundle, &depths, loss.alpha, &weights)?
        } else {
            let eval = evaluate(
                &bundle,
                &depths,
                loss.alpha,
                &weights,
                EvalOptions {
                    gradients: true,
                    skip_unweighted: true,
                },
            )?;
            let g = eval.gradients.expect("gradients requested");
            (eval.report, g.depth, g.pose)
        };
        if !report.total.is_finite() {
            return Err(Error::Diverged {
                iteration,
                detail: format!("total loss is {}", report.total),
            });
        }
        history.push(record(iteration, flipped, &report, &depths, &truth, cap)?);
        // chain rule through D = exp(l)
        let log_depth = depth_grad
            .iter()
            .zip(&depths)
            .map(|(g, d)| {
                let data = g.data().iter().zip(d.data()).map(|(g, d)| g * d).collect();
                Grid::from_vec(g.width(), g.height(), data)
            })
            .collect::<Result<Vec<_>>>()?;
        state.adam_step(&StateGradient { log_depth, pose }, config)?;
        if state
            .log_depth
            .iter()
            .any(|l| l.data().iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Diverged {
                iteration,
                detail: "non-finite depth parameter".into(),
            });
        }
    }
    bundle.front_poses = state.poses;
    let depths = state.depths();
    let report = evaluate(
        &bundle,
        &depths,
        loss.alpha,
        &weights,
        EvalOptions::default(),
    )?
    .report;
    let last = record(config.iterations, false, &report, &depths, &truth, cap)?;
    Ok(Recovery {
        depths,
        poses: state.poses,
        history,
        last,
    })
}

/// Header of [`write_history_csv`].
pub fn history_header() -> Vec<String> {
    let mut h = vec!["iteration".to_string(), "flipped".into(), "total".into()];
    h.extend(Term::ALL.iter().map(|t| t.name().to_string()));
    h.extend(["median_ratio", "abs_rel", "abs_rel_scaled"].map(String::from));
    h
}

/// Writes one CSV row per history entry. Floats use Rust's shortest
/// round-trip formatting.
pub fn write_history_csv(rows: &[HistoryRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(history_header())?;
    for r in rows {
        let mut rec = vec![
            r.iteration.to_string(),
            u8::from(r.flipped).to_string(),
            r.total.to_string(),
        ];
        rec.extend(r.terms.iter().map(f64::to_string));
        rec.extend([r.median_ratio, r.abs_rel, r.abs_rel_scaled].map(|v| v.to_string()));
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| Error::io("history", e))?;
    Ok(())
}

/// Centered moving average over `window` entries (truncated at the ends).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + window - half).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}
