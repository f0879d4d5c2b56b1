//! Depth metrics, median scaling and all-region / overlap-region reports.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{DepthMap, Mask};
use crate::rig::CameraRig;
use crate::warp::{overlap_mask, project_depth_dense, transform_depth};

/// Predictions are clamped to `[MIN_DEPTH, cap]` before scoring.
pub const MIN_DEPTH: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl DepthMetrics {
    pub const FIELDS: [&'static str; 6] =
        ["abs_rel", "sq_rel", "rmse", "delta1", "delta2", "delta3"];

    pub fn values(&self) -> [f64; 6] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }
}

fn ensure_same_dims(pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<()> {
    pred.ensure_dims(gt.dims())?;
    mask.ensure_dims(gt.dims())
}

fn gt_usable(gt: f64, cap: f64) -> bool {
    gt > 0.0 && gt <= cap
}

/// Metrics over pixels where `mask` holds and `0 < gt <= cap`.
pub fn depth_metrics(
    pred: &DepthMap,
    gt: &DepthMap,
    mask: &Mask,
    cap: f64,
) -> Result<DepthMetrics> {
    ensure_same_dims(pred, gt, mask)?;
    if !(cap > MIN_DEPTH) {
        return Err(Error::InvalidConfig(format!(
            "depth cap must exceed {MIN_DEPTH}, got {cap}"
        )));
    }
    let mut n = 0usize;
    let (mut abs_rel, mut sq_rel, mut sq) = (0.0, 0.0, 0.0);
    let mut below = [0usize; 3];
    for ((&p, &g), &m) in pred.data().iter().zip(gt.data()).zip(mask.data()) {
        if !m || !gt_usable(g, cap) {
            continue;
        }
        let p = p.clamp(MIN_DEPTH, cap);
        let err = p - g;
        n += 1;
        abs_rel += err.abs() / g;
        sq_rel += err * err / g;
        sq += err * err;
        let ratio = (p / g).max(g / p);
        let mut threshold = 1.0;
        for b in &mut below {
            threshold *= 1.25;
            if ratio < threshold {
                *b += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let nf = n as f64;
    Ok(DepthMetrics {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (sq / nf).sqrt(),
        delta1: below[0] as f64 / nf,
        delta2: below[1] as f64 / nf,
        delta3: below[2] as f64 / nf,
    })
}

/// Lower median (element `(n - 1) / 2` after sorting).
pub fn lower_median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let k = (values.len() - 1) / 2;
    let (_, m, _) = values.select_nth_unstable_by(k, f64::total_cmp);
    Some(*m)
}

/// Rescales `pred` by `median(gt) / median(pred)` over `mask` (restricted to
/// positive ground truth) and returns the scaled map with the ratio.
pub fn median_scale(pred: &DepthMap, gt: &DepthMap, mask: &Mask) -> Result<(DepthMap, f64)> {
    ensure_same_dims(pred, gt, mask)?;
    let (mut p, mut g): (Vec<f64>, Vec<f64>) = pred
        .data()
        .iter()
        .zip(gt.data())
        .zip(mask.data())
        .filter(|((_, &g), &m)| m && g > 0.0)
        .map(|((&p, &g), _)| (p, g))
        .unzip();
    let (Some(mp), Some(mg)) = (lower_median(&mut p), lower_median(&mut g)) else {
        return Err(Error::EmptyMask);
    };
    if mp == 0.0 || mg == 0.0 {
        return Err(Error::ZeroMedian);
    }
    let ratio = mg / mp;
    Ok((pred.map(|&d| d * ratio), ratio))
}

/// Lower median of `pred / gt` pooled over every camera's mask.
pub fn median_ratio(preds: &[DepthMap], gts: &[DepthMap], masks: &[Mask]) -> Result<f64> {
    let mut ratios = Vec::new();
    for ((p, g), m) in preds.iter().zip(gts).zip(masks) {
        ensure_same_dims(p, g, m)?;
        ratios.extend(
            p.data()
                .iter()
                .zip(g.data())
                .zip(m.data())
                .filter(|((_, &g), &m)| m && g > 0.0)
                .map(|((&p, &g), _)| p / g),
        );
    }
    lower_median(&mut ratios).ok_or(Error::EmptyMask)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionReport {
    pub all: DepthMetrics,
    /// Absent when the camera shares no field of view with its neighbours.
    pub overlap: Option<DepthMetrics>,
}

/// Metrics for camera `i` over its full valid mask and over the part of it
/// that a ring neighbour also sees (located through `overlap_depths`).
pub fn region_report(
    pred: &DepthMap,
    gt: &DepthMap,
    valid: &Mask,
    rig: &CameraRig,
    overlap_depths: &[DepthMap],
    i: usize,
    cap: f64,
) -> Result<RegionReport> {
    let all = depth_metrics(pred, gt, valid, cap)?;
    let overlap_region = valid.and(&overlap_mask(rig, overlap_depths, i));
    let overlap = match depth_metrics(pred, gt, &overlap_region, cap) {
        Ok(m) => Some(m),
        Err(Error::EmptyMask) => None,
        Err(e) => return Err(e),
    };
    Ok(RegionReport { all, overlap })
}

/// Mean of `|D_i - D~_i| / D_i` over every ordered neighbour pair, where
/// `D~_i` is the neighbour's depth moved into camera `i` and resampled onto
/// its grid. `None` when no pair overlaps.
pub fn inter_view_disagreement(depths: &[DepthMap], rig: &CameraRig) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (i, j) in rig.neighbor_pairs() {
        let (moved, _) = transform_depth(&depths[j], &rig.relative(j, i), rig.intrinsics(j));
        let (projected, valid) = project_depth_dense(
            &depths[i],
            &moved,
            &rig.relative(i, j),
            rig.intrinsics(i),
            rig.intrinsics(j),
        );
        for ((&d, &dt), &m) in depths[i]
            .data()
            .iter()
            .zip(projected.data())
            .zip(valid.data())
        {
            if m && d > 0.0 {
                sum += (d - dt).abs() / d;
                n += 1;
            }
        }
    }
    (n > 0).then(|| sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Grid;
    use crate::synth::{make_rig, make_sequence, tilted_plane, EgoMotion};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_case(seed: u64) -> (DepthMap, DepthMap, Mask) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = DepthMap::from_fn(4, 4, |_, _| rng.random_range(0.5..30.0));
        let pred = DepthMap::from_fn(4, 4, |_, _| rng.random_range(0.2..40.0));
        let mask = Mask::from_fn(4, 4, |x, y| (x + y) % 5 != 0);
        (pred, gt, mask)
    }

    /// Plain nested loops with explicit clamps.
    fn oracle(pred: &DepthMap, gt: &DepthMap, mask: &Mask, cap: f64) -> [f64; 6] {
        let mut rows = Vec::new();
        for y in 0..gt.height() {
            for x in 0..gt.width() {
                let g = *gt.get(x, y);
                if *mask.get(x, y) && g > 0.0 && g <= cap {
                    let mut p = *pred.get(x, y);
                    if p < 1e-3 {
                        p = 1e-3;
                    }
                    if p > cap {
                        p = cap;
                    }
                    rows.push((p, g));
                }
            }
        }
        let n = rows.len() as f64;
        let mean =
            |f: &dyn Fn(f64, f64) -> f64| rows.iter().map(|&(p, g)| f(p, g)).sum::<f64>() / n;
        let within = |t: f64| mean(&|p, g| if f64::max(p / g, g / p) < t { 1.0 } else { 0.0 });
        [
            mean(&|p, g| (p - g).abs() / g),
            mean(&|p, g| (p - g).powi(2) / g),
            mean(&|p, g| (p - g).powi(2)).sqrt(),
            within(1.25),
            within(1.5625),
            within(1.953125),
        ]
    }

    #[test]
    fn random_grids_match_scalar_oracle() {
        for seed in 0..50 {
            let (pred, gt, mask) = random_case(seed);
            let got = depth_metrics(&pred, &gt, &mask, 25.0).unwrap().values();
            let want = oracle(&pred, &gt, &mask, 25.0);
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() <= 1e-12, "seed {seed}: {got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn perfect_prediction() {
        let (_, gt, mask) = random_case(1);
        let m = depth_metrics(&gt, &gt, &mask, 100.0).unwrap();
        assert_eq!(m.values(), [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn doubled_prediction_fails_every_threshold() {
        let gt = DepthMap::from_fn(4, 4, |x, y| 1.0 + (x + 4 * y) as f64);
        let pred = gt.map(|d| 2.0 * d);
        let m = depth_metrics(&pred, &gt, &Mask::filled(4, 4, true), 80.0).unwrap();
        assert!((m.abs_rel - 1.0).abs() < 1e-15);
        assert_eq!([m.delta1, m.delta2, m.delta3], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_effective_mask_is_an_error() {
        let gt = DepthMap::filled(3, 3, 100.0);
        let r = depth_metrics(&gt, &gt, &Mask::filled(3, 3, true), 80.0);
        assert!(matches!(r, Err(Error::EmptyMask)));
        let r = depth_metrics(&gt, &gt, &Mask::filled(3, 3, false), 200.0);
        assert!(matches!(r, Err(Error::EmptyMask)));
    }

    #[test]
    fn lower_median_convention() {
        assert_eq!(lower_median(&mut [4.0, 1.0, 3.0, 2.0]), Some(2.0));
        assert_eq!(lower_median(&mut [5.0, 1.0, 3.0]), Some(3.0));
        assert_eq!(lower_median(&mut []), None);
    }

    #[test]
    fn median_scale_matches_sort_oracle() {
        let gt = DepthMap::from_fn(5, 3, |x, y| 2.0 + x as f64 + 0.3 * y as f64);
        let pred = gt.map(|d| if *d > 4.0 { 1.7 * d } else { 0.6 * d });
        let mask = Mask::filled(5, 3, true);
        let sorted_lower = |g: &DepthMap| {
            let mut v = g.data().to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[(v.len() - 1) / 2]
        };
        let (scaled, ratio) = median_scale(&pred, &gt, &mask).unwrap();
        assert_eq!(ratio, sorted_lower(&gt) / sorted_lower(&pred));
        assert_eq!(scaled.data()[4], pred.data()[4] * ratio);
    }

    #[test]
    fn median_scale_of_identity_and_multiple() {
        let (_, gt, mask) = random_case(3);
        assert_eq!(median_scale(&gt, &gt, &mask).unwrap().1, 1.0);
        let (scaled, ratio) = median_scale(&gt.map(|d| d * 4.0), &gt, &mask).unwrap();
        assert_eq!(ratio, 0.25);
        assert_eq!(
            depth_metrics(&scaled, &gt, &mask, 100.0).unwrap().values(),
            [0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
        );
        assert!(matches!(
            median_scale(&gt, &gt, &Mask::filled(4, 4, false)),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn zero_median_is_an_error() {
        let gt = DepthMap::filled(3, 1, 1.0);
        let pred = DepthMap::filled(3, 1, 0.0);
        assert!(matches!(
            median_scale(&pred, &gt, &Mask::filled(3, 1, true)),
            Err(Error::ZeroMedian)
        ));
    }

    proptest! {
        #[test]
        fn median_scaled_metrics_ignore_positive_rescaling(seed in 0u64..500, exponent in -3i32..=3) {
            // powers of two keep the rescaling exact in floating point
            let c = 2f64.powi(exponent);
            let (pred, gt, mask) = random_case(seed);
            let (a, _) = median_scale(&pred, &gt, &mask).unwrap();
            let (b, _) = median_scale(&pred.map(|d| d * c), &gt, &mask).unwrap();
            prop_assert_eq!(
                depth_metrics(&a, &gt, &mask, 1e4).unwrap(),
                depth_metrics(&b, &gt, &mask, 1e4).unwrap()
            );
        }

        #[test]
        fn deltas_are_ordered_fractions(seed in 0u64..500) {
            let (pred, gt, mask) = random_case(seed);
            let m = depth_metrics(&pred, &gt, &mask, 25.0).unwrap();
            prop_assert!(0.0 <= m.delta1 && m.delta1 <= m.delta2 && m.delta2 <= m.delta3 && m.delta3 <= 1.0);
            prop_assert!(m.values().iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    fn two_camera_scene() -> (CameraRig, Vec<DepthMap>, Vec<Mask>) {
        let scene = tilted_plane(10.0, 15.0, 0.5, 7, (0.25, 0.6)).unwrap();
        let rig = make_rig(2, 30.0, 90.0, 48, 32).unwrap();
        let seq = make_sequence(&scene, &rig, &EgoMotion::identity(), 1).unwrap();
        (rig, seq.depths(0), seq.valid_masks(0))
    }

    #[test]
    fn single_camera_has_no_overlap() {
        let scene = tilted_plane(10.0, 0.0, 0.0, 7, (0.25, 0.6)).unwrap();
        let rig = make_rig(1, 30.0, 90.0, 16, 12).unwrap();
        let seq = make_sequence(&scene, &rig, &EgoMotion::identity(), 1).unwrap();
        let d = seq.depths(0);
        let r = region_report(&d[0], &d[0], &seq.valid_masks(0)[0], &rig, &d, 0, 80.0).unwrap();
        assert!(r.overlap.is_none());
        assert_eq!(r.all.abs_rel, 0.0);
    }

    #[test]
    fn overlap_error_shows_in_overlap_report() {
        let (rig, gt, valid) = two_camera_scene();
        let overlap = overlap_mask(&rig, &gt, 0).and(&valid[0]);
        assert!(overlap.count() > 0 && overlap.count() < valid[0].count());
        let pred = Grid::from_fn(48, 32, |x, y| {
            let g = *gt[0].get(x, y);
            if *overlap.get(x, y) {
                1.2 * g
            } else {
                g
            }
        });
        let r = region_report(&pred, &gt[0], &valid[0], &rig, &gt, 0, 80.0).unwrap();
        let o = r.overlap.unwrap();
        assert!(o.abs_rel > r.all.abs_rel);
        assert_eq!(o.values(), oracle(&pred, &gt[0], &overlap, 80.0));
        let want_all = oracle(&pred, &gt[0], &valid[0], 80.0);
        for (g, w) in r.all.values().iter().zip(want_all) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn ground_truth_views_agree() {
        let (rig, gt, _) = two_camera_scene();
        let d = inter_view_disagreement(&gt, &rig).unwrap();
        assert!(d < 1e-3, "{d}");
        let shifted = vec![gt[0].map(|d| d * 1.1), gt[1].clone()];
        assert!(inter_view_disagreement(&shifted, &rig).unwrap() > 0.05);
    }
}
