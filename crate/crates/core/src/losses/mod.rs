//! Training losses: photometric reconstruction (temporal, spatial and
//! spatial-temporal), dense depth consistency, multi-view reconstruction
//! consistency, edge-aware smoothness and their weighted total.
//!
//! Every term is a mean over valid pixels, then a mean over the views or
//! camera pairs that contributed at least one valid pixel.

mod engine;
pub mod ssim;

use serde::{Deserialize, Serialize};

pub use engine::{evaluate, EvalOptions, Evaluation, Gradients};
pub use ssim::ssim_map;

use crate::error::{Error, Result};
use crate::imaging::{DepthMap, Image, Mask};
use crate::rig::{distribute_pose, flip_pose, CameraRig, RigidTransform};
use crate::warp::warp_image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the SSIM part of the photometric error.
    pub alpha: f64,
    pub lambda_s: f64,
    pub lambda_st: f64,
    pub lambda_smooth: f64,
    pub lambda_ddcl: f64,
    pub lambda_mvrcl: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.85,
            lambda_s: 0.03,
            lambda_st: 0.1,
            lambda_smooth: 0.1,
            lambda_ddcl: 1e-3,
            lambda_mvrcl: 0.2,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        for (name, v) in [
            ("lambda_s", self.lambda_s),
            ("lambda_st", self.lambda_st),
            ("lambda_smooth", self.lambda_smooth),
            ("lambda_ddcl", self.lambda_ddcl),
            ("lambda_mvrcl", self.lambda_mvrcl),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> TermWeights {
        TermWeights {
            temporal: 1.0,
            spatial: self.lambda_s,
            spatiotemporal: self.lambda_st,
            smoothness: self.lambda_smooth,
            ddcl: self.lambda_ddcl,
            mvrcl: self.lambda_mvrcl,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Term {
    Temporal,
    Spatial,
    SpatioTemporal,
    Smoothness,
    Ddcl,
    Mvrcl,
}

impl Term {
    pub const ALL: [Term; 6] = [
        Term::Temporal,
        Term::Spatial,
        Term::SpatioTemporal,
        Term::Smoothness,
        Term::Ddcl,
        Term::Mvrcl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Temporal => "L_t",
            Term::Spatial => "L_s",
            Term::SpatioTemporal => "L_st",
            Term::Smoothness => "L_smooth",
            Term::Ddcl => "L_DDCL",
            Term::Mvrcl => "L_MVRCL",
        }
    }

    /// Whether the term reconstructs images through the temporal poses.
    pub fn depends_on_pose(self) -> bool {
        matches!(self, Term::Temporal | Term::SpatioTemporal | Term::Mvrcl)
    }
}

/// Multipliers applied to each term when forming a total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TermWeights {
    pub temporal: f64,
    pub spatial: f64,
    pub spatiotemporal: f64,
    pub smoothness: f64,
    pub ddcl: f64,
    pub mvrcl: f64,
}

impl TermWeights {
    pub fn zero() -> Self {
        Self {
            temporal: 0.0,
            spatial: 0.0,
            spatiotemporal: 0.0,
            smoothness: 0.0,
            ddcl: 0.0,
            mvrcl: 0.0,
        }
    }

    /// Unit weight on `term`, zero elsewhere.
    pub fn only(term: Term) -> Self {
        let mut w = Self::zero();
        *w.get_mut(term) = 1.0;
        w
    }

    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::Temporal => self.temporal,
            Term::Spatial => self.spatial,
            Term::SpatioTemporal => self.spatiotemporal,
            Term::Smoothness => self.smoothness,
            Term::Ddcl => self.ddcl,
            Term::Mvrcl => self.mvrcl,
        }
    }

    pub fn get_mut(&mut self, term: Term) -> &mut f64 {
        match term {
            Term::Temporal => &mut self.temporal,
            Term::Spatial => &mut self.spatial,
            Term::SpatioTemporal => &mut self.spatiotemporal,
            Term::Smoothness => &mut self.smoothness,
            Term::Ddcl => &mut self.ddcl,
            Term::Mvrcl => &mut self.mvrcl,
        }
    }
}

/// One loss term: its value, the number of supervised pixels, and how many
/// views or pairs contributed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TermValue {
    pub value: f64,
    pub pixels: usize,
    pub groups: usize,
}

impl TermValue {
    /// True when nothing supervised this term; its value is then 0.
    pub fn is_empty(&self) -> bool {
        self.pixels == 0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub temporal: TermValue,
    pub spatial: TermValue,
    pub spatiotemporal: TermValue,
    pub smoothness: TermValue,
    pub ddcl: TermValue,
    pub mvrcl: TermValue,
}

impl LossReport {
    pub fn term(&self, term: Term) -> &TermValue {
        match term {
            Term::Temporal => &self.temporal,
            Term::Spatial => &self.spatial,
            Term::SpatioTemporal => &self.spatiotemporal,
            Term::Smoothness => &self.smoothness,
            Term::Ddcl => &self.ddcl,
            Term::Mvrcl => &self.mvrcl,
        }
    }

    pub(crate) fn term_mut(&mut self, term: Term) -> &mut TermValue {
        match term {
            Term::Temporal => &mut self.temporal,
            Term::Spatial => &mut self.spatial,
            Term::SpatioTemporal => &mut self.spatiotemporal,
            Term::Smoothness => &mut self.smoothness,
            Term::Ddcl => &mut self.ddcl,
            Term::Mvrcl => &mut self.mvrcl,
        }
    }

    /// Weighted sum of the per-term values.
    pub fn recombine(&self, weights: &TermWeights) -> f64 {
        Term::ALL
            .iter()
            .map(|&t| weights.get(t) * self.term(t).value)
            .sum()
    }

    /// Structured text record: a TOML document with the total and one
    /// `[[term]]` table (name, value, pixels, groups) per term.
    pub fn to_toml(&self) -> String {
        #[derive(Serialize)]
        struct Row<'a> {
            name: &'a str,
            value: f64,
            pixels: usize,
            groups: usize,
        }
        #[derive(Serialize)]
        struct Doc<'a> {
            total: f64,
            term: Vec<Row<'a>>,
        }
        let doc = Doc {
            total: self.total,
            term: Term::ALL
                .iter()
                .map(|&t| {
                    let v = self.term(t);
                    Row {
                        name: t.name(),
                        value: v.value,
                        pixels: v.pixels,
                        groups: v.groups,
                    }
                })
                .collect(),
        };
        toml::to_string(&doc).expect("loss report serializes")
    }
}

/// Which temporal neighbour of the target frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemporalSource {
    Previous = 0,
    Next = 1,
}

impl TemporalSource {
    pub const BOTH: [TemporalSource; 2] = [TemporalSource::Previous, TemporalSource::Next];

    /// Index into [`SurroundBundle::frames`].
    pub fn frame_index(self) -> usize {
        match self {
            TemporalSource::Previous => 0,
            TemporalSource::Next => 2,
        }
    }
}

/// Surround images at `t - 1`, `t`, `t + 1` with the rig and the front
/// camera's temporal poses.
#[derive(Debug, Clone, PartialEq)]
pub struct SurroundBundle {
    pub rig: CameraRig,
    /// `frames[0]`, `frames[1]`, `frames[2]` hold one image per camera at
    /// `t - 1`, `t` and `t + 1`.
    pub frames: [Vec<Image>; 3],
    /// Front-camera point maps from time `t` to `t - 1` and to `t + 1`,
    /// indexed by [`TemporalSource`].
    pub front_poses: [RigidTransform; 2],
}

impl SurroundBundle {
    pub fn target_images(&self) -> &[Image] {
        &self.frames[1]
    }

    pub fn front_pose(&self, source: TemporalSource) -> &RigidTransform {
        &self.front_poses[source as usize]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rig.len();
        for (k, frame) in self.frames.iter().enumerate() {
            if frame.len() != n {
                return Err(Error::InvalidConfig(format!(
                    "frame {k} has {} images for a {n}-camera rig",
                    frame.len()
                )));
            }
            for (i, img) in frame.iter().enumerate() {
                img.ensure_dims(self.rig.intrinsics(i).dims())?;
                img.check_image()?;
            }
        }
        for p in &self.front_poses {
            p.check(crate::rig::ROTATION_TOLERANCE)?;
        }
        Ok(())
    }

    /// The horizontally flipped bundle: mirrored images, flipped intrinsics
    /// and extrinsics, and flipped temporal poses.
    pub fn hflip(&self) -> SurroundBundle {
        self.hflip_with(true)
    }

    /// Like [`SurroundBundle::hflip`], optionally leaving the temporal poses
    /// untouched (an intentionally inconsistent bundle).
    pub fn hflip_with(&self, flip_poses: bool) -> SurroundBundle {
        let flip_frame = |f: &Vec<Image>| f.iter().map(Image::hflip).collect::<Vec<_>>();
        SurroundBundle {
            rig: self.rig.flipped(),
            frames: [
                flip_frame(&self.frames[0]),
                flip_frame(&self.frames[1]),
                flip_frame(&self.frames[2]),
            ],
            front_poses: if flip_poses {
                [
                    flip_pose(&self.front_poses[0]),
                    flip_pose(&self.front_poses[1]),
                ]
            } else {
                self.front_poses
            },
        }
    }
}

/// Mean photometric error over `mask`:
/// `(1 - alpha) |a - b|_1 / 3 + alpha (1 - SSIM(a, b)) / 2` per pixel, with
/// SSIM averaged over channels. An empty mask yields a zero-pixel term.
pub fn photometric_loss(a: &Image, b: &Image, mask: &Mask, alpha: f64) -> Result<TermValue> {
    b.ensure_dims(a.dims())?;
    mask.ensure_dims(a.dims())?;
    Ok(engine::photometric(a, b, mask, alpha, false).0)
}

/// Photometric loss between the spatial and the spatial-temporal
/// reconstructions of one view over the intersection of their masks.
pub fn mvrcl(
    recon_spatial: &Image,
    recon_spatiotemporal: &Image,
    mask_s: &Mask,
    mask_st: &Mask,
    alpha: f64,
) -> Result<TermValue> {
    mask_st.ensure_dims(mask_s.dims())?;
    photometric_loss(
        recon_spatial,
        recon_spatiotemporal,
        &mask_s.and(mask_st),
        alpha,
    )
}

/// Edge-aware smoothness of the mean-normalized depth, forward differences
/// weighted by `exp(-|dI|)` with the image gradient averaged over channels.
pub fn smoothness(depth: &DepthMap, img: &Image) -> Result<f64> {
    img.ensure_dims(depth.dims())?;
    Ok(engine::smoothness(depth, img, None))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairReport {
    pub target: usize,
    pub source: usize,
    pub value: f64,
    pub pixels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdclReport {
    pub value: TermValue,
    pub pairs: Vec<PairReport>,
}

/// Dense depth consistency over every ordered pair of ring neighbours.
pub fn ddcl(depths: &[DepthMap], rig: &CameraRig) -> Result<DdclReport> {
    engine::check_depths(depths, rig)?;
    let (value, pairs) = engine::ddcl(depths, rig, 0.0, None);
    Ok(DdclReport { value, pairs })
}

/// Masked mean absolute reconstruction error (channel-averaged) per route
/// kind, each averaged over routes that reconstruct at least one pixel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionErrors {
    pub temporal: f64,
    pub spatial: f64,
    pub spatiotemporal: f64,
}

/// Reconstructs every target view from its temporal, spatial and
/// spatial-temporal sources and measures the masked mean absolute error.
/// Temporal camera motion comes from [`distribute_pose`].
pub fn reconstruction_errors(
    bundle: &SurroundBundle,
    depths: &[DepthMap],
) -> Result<ReconstructionErrors> {
    bundle.validate()?;
    engine::check_depths(depths, &bundle.rig)?;
    let rig = &bundle.rig;
    let e0 = rig.extrinsic(0);
    let targets = bundle.target_images();
    let mae = |target: &Image, recon: &Image, mask: &Mask| -> Option<f64> {
        let n = mask.count();
        (n > 0).then(|| {
            let sum: f64 = target
                .data()
                .iter()
                .zip(recon.data())
                .zip(mask.data())
                .filter(|(_, &m)| m)
                .map(|((a, b), _)| (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>() / 3.0)
                .sum();
            sum / n as f64
        })
    };
    let mean = |v: Vec<f64>| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let (mut t, mut s, mut st) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..rig.len() {
        let ki = rig.intrinsics(i);
        let ei = rig.extrinsic(i);
        for tau in TemporalSource::BOTH {
            let pose_i = distribute_pose(bundle.front_pose(tau), e0, ei);
            let source = &bundle.frames[tau.frame_index()][i];
            let (recon, mask) = warp_image(&depths[i], &pose_i, ki, ki, source);
            t.extend(mae(&targets[i], &recon, &mask));
            for j in rig.neighbors(i) {
                // camera i at t -> camera i at t +- 1 -> camera j at t +- 1
                let to_j = rig.relative(i, j) * pose_i;
                let source = &bundle.frames[tau.frame_index()][j];
                let (recon, mask) = warp_image(&depths[i], &to_j, ki, rig.intrinsics(j), source);
                st.extend(mae(&targets[i], &recon, &mask));
            }
        }
        for j in rig.neighbors(i) {
            let (recon, mask) = warp_image(
                &depths[i],
                &rig.relative(i, j),
                ki,
                rig.intrinsics(j),
                &targets[j],
            );
            s.extend(mae(&targets[i], &recon, &mask));
        }
    }
    Ok(ReconstructionErrors {
        temporal: mean(t),
        spatial: mean(s),
        spatiotemporal: mean(st),
    })
}

/// Evaluates every term at the given depth hypothesis.
pub fn total_loss(
    bundle: &SurroundBundle,
    depths: &[DepthMap],
    config: &LossConfig,
) -> Result<LossReport> {
    config.validate()?;
    let eval = evaluate(
        bundle,
        depths,
        config.alpha,
        &config.weights(),
        EvalOptions::default(),
    )?;
    Ok(eval.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Grid;

    fn texture(w: usize, h: usize) -> Image {
        Image::from_fn(w, h, |x, y| {
            let (x, y) = (x as f64, y as f64);
            [
                0.5 + 0.2 * (0.5 * x).sin(),
                0.5 + 0.2 * (0.4 * y).cos(),
                0.4 + 0.1 * (0.3 * (x - y)).sin(),
            ]
        })
    }

    #[test]
    fn default_config_carries_reference_weights() {
        let c = LossConfig::default();
        assert_eq!(
            (
                c.lambda_s,
                c.lambda_st,
                c.lambda_smooth,
                c.lambda_ddcl,
                c.lambda_mvrcl
            ),
            (0.03, 0.1, 0.1, 1e-3, 0.2)
        );
        assert_eq!(c.alpha, 0.85);
        assert!(c.validate().is_ok());
        assert!(LossConfig { alpha: 1.5, ..c }.validate().is_err());
        assert!(LossConfig {
            lambda_s: -1.0,
            ..c
        }
        .validate()
        .is_err());
    }

    #[test]
    fn photometric_cases() {
        let a = texture(7, 6);
        let mask = Mask::filled(7, 6, true);
        assert_eq!(photometric_loss(&a, &a, &mask, 0.85).unwrap().value, 0.0);
        let low = a.map(|p| [p[0] * 0.5, p[1] * 0.5, p[2] * 0.5]);
        let brighter = low.map(|p| [p[0] + 0.1, p[1] + 0.1, p[2] + 0.1]);
        let v = photometric_loss(&low, &brighter, &mask, 0.0).unwrap();
        assert!((v.value - 0.1).abs() < 1e-12);
        assert_eq!(v.pixels, 42);
        let empty = Mask::filled(7, 6, false);
        assert!(photometric_loss(&a, &low, &empty, 0.85).unwrap().is_empty());
    }

    #[test]
    fn photometric_constant_pair_closed_form() {
        let (m1, m2, alpha) = (0.25, 0.6, 0.85);
        let a = Image::filled(5, 5, [m1; 3]);
        let b = Image::filled(5, 5, [m2; 3]);
        let s = (2.0 * m1 * m2 + ssim::C1) / (m1 * m1 + m2 * m2 + ssim::C1);
        let expected = (1.0 - alpha) * (m2 - m1) + alpha * (1.0 - s) / 2.0;
        let v = photometric_loss(&a, &b, &Mask::filled(5, 5, true), alpha).unwrap();
        assert!((v.value - expected).abs() < 1e-12);
    }

    #[test]
    fn mvrcl_cases() {
        let a = texture(6, 6);
        let b = a.map(|p| [p[0] * 0.9, p[1], p[2]]);
        let full = Mask::filled(6, 6, true);
        assert_eq!(mvrcl(&a, &a, &full, &full, 0.85).unwrap().value, 0.0);
        let left = Grid::from_fn(6, 6, |x, _| x < 3);
        let right = Grid::from_fn(6, 6, |x, _| x >= 3);
        let v = mvrcl(&a, &b, &left, &right, 0.85).unwrap();
        assert_eq!((v.value, v.pixels), (0.0, 0));
        assert!(mvrcl(&a, &b, &full, &full, 0.85).unwrap().value > 0.0);
    }

    #[test]
    fn smoothness_ramp_matches_summation() {
        let (w, h) = (9, 5);
        let img = Image::filled(w, h, [0.4; 3]);
        assert_eq!(smoothness(&DepthMap::filled(w, h, 3.0), &img).unwrap(), 0.0);
        let (a, b) = (2.0, 0.25);
        let ramp = DepthMap::from_fn(w, h, |x, _| a + b * x as f64);
        let got = smoothness(&ramp, &img).unwrap();
        // Direct loop over forward differences of the normalized depth.
        let mean = ramp.data().iter().sum::<f64>() / (w * h) as f64;
        let mut sx = 0.0;
        for y in 0..h {
            for x in 0..w - 1 {
                sx += ((ramp.get(x + 1, y) - ramp.get(x, y)) / mean).abs();
            }
        }
        let expected = sx / ((w - 1) * h) as f64;
        assert!((got - expected).abs() < 1e-12);
        assert!((got - b / (a + b * (w as f64 - 1.0) / 2.0)).abs() < 1e-12);
        let edges = Image::from_fn(w, h, |x, _| if x % 2 == 0 { [0.0; 3] } else { [1.0; 3] });
        assert!(smoothness(&ramp, &edges).unwrap() < got);
    }
}
