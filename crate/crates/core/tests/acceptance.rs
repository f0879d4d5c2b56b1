//! Acceptance suite: one line per criterion, `PASS` or `FAIL`, with the
//! measured quantities. Runs the criteria one after another so the timing
//! bounds are measured without competing work. Exits non-zero if any fails.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use crossview::cli::{run_from, Verdict};
use crossview::config::{load_rig, load_scene};
use crossview::eval::{depth_metrics, inter_view_disagreement, lower_median, median_scale};
use crossview::grad::{check_loss_gradients, gradcheck_point, GradcheckOptions};
use crossview::imaging::{DepthMap, Mask};
use crossview::losses::{reconstruction_errors, total_loss, LossConfig};
use crossview::optimize::{recover_depth, smoothed, OptimConfig, Recovery, TermSwitches};
use crossview::rig::{
    distribute_pose, exp_se3, flip_intrinsics, flip_pose, log_se3, Camera, CameraRig, Intrinsics,
    RigidTransform, Twist,
};
use crossview::synth::{make_rig, make_sequence, tilted_plane, EgoMotion, Sequence};
use crossview::warp::{forward_warp_depth, project_depth_dense, transform_depth};
use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdicts {
    lines: Vec<(bool, String)>,
}

impl Verdicts {
    fn record(&mut self, id: usize, name: &str, run: impl FnOnce() -> (bool, String)) {
        let start = Instant::now();
        let (pass, detail) = match std::panic::catch_unwind(std::panic::AssertUnwindSafe(run)) {
            Ok(r) => r,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        let line = format!(
            "{} [{id:2}] {name}: {detail} ({:.2} s)",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        println!("{line}");
        self.lines.push((pass, line));
    }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn random_transform(rng: &mut ChaCha8Rng) -> RigidTransform {
    let mut xi = Twist::zeros();
    for k in 0..3 {
        xi[k] = rng.random_range(-3.0..3.0);
    }
    let axis = Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    )
    .normalize();
    let angle = rng.random_range(0.0..std::f64::consts::PI - 0.1);
    xi.fixed_rows_mut::<3>(3).copy_from(&(axis * angle));
    exp_se3(&xi)
}

fn max_abs(m: &Matrix4<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

fn within(elapsed: Duration, limit: f64) -> bool {
    elapsed.as_secs_f64() < limit
}

/// Geometry against dense 4x4 matrix products and inverses.
fn geometry_oracle() -> (bool, String) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut compose_err, mut invert_err, mut distribute_err, mut round_trip) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let (a, b, e0, ei) = (
            random_transform(&mut rng),
            random_transform(&mut rng),
            random_transform(&mut rng),
            random_transform(&mut rng),
        );
        let (ma, mb, m0, mi) = (a.to_matrix(), b.to_matrix(), e0.to_matrix(), ei.to_matrix());
        compose_err = compose_err.max(max_abs(&((a * b).to_matrix() - ma * mb)));
        invert_err = invert_err.max(max_abs(
            &(a.inverse().to_matrix() - ma.try_inverse().unwrap()),
        ));
        let dense = mi.try_inverse().unwrap() * m0 * ma * m0.try_inverse().unwrap() * mi;
        distribute_err = distribute_err.max(max_abs(
            &(distribute_pose(&a, &e0, &ei).to_matrix() - dense),
        ));
        let mut xi = Twist::zeros();
        for k in 0..6 {
            xi[k] = rng.random_range(-1.0..1.0);
        }
        if xi.fixed_rows::<3>(3).norm() >= std::f64::consts::PI - 0.1 {
            continue;
        }
        round_trip = round_trip.max((log_se3(&exp_se3(&xi)).unwrap() - xi).amax());
    }
    let elapsed = start.elapsed();
    let pass = compose_err < 1e-9
        && invert_err < 1e-9
        && distribute_err < 1e-9
        && round_trip < 1e-8
        && within(elapsed, 1.0);
    (
        pass,
        format!(
            "compose {compose_err:.1e}, invert {invert_err:.1e}, distribute {distribute_err:.1e} (< 1e-9); \
             exp/log round trip {round_trip:.1e} (< 1e-8); {:.3} s (< 1 s)",
            elapsed.as_secs_f64()
        ),
    )
}

/// Flip involutions, homomorphism and the translation sign pattern.
fn flip_algebra() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut involution = true;
    let mut homomorphism = 0.0f64;
    let mut entries = true;
    for _ in 0..100 {
        let (a, b) = (random_transform(&mut rng), random_transform(&mut rng));
        involution &= flip_pose(&flip_pose(&a)) == a;
        homomorphism = homomorphism.max(max_abs(
            &(flip_pose(&(a * b)).to_matrix() - (flip_pose(&a) * flip_pose(&b)).to_matrix()),
        ));
        // entry-level sign mask, 0-based (row, column)
        let f = flip_pose(&a);
        let negated = [(0, 1), (0, 2), (1, 0), (2, 0)];
        for r in 0..3 {
            for c in 0..3 {
                let want = if negated.contains(&(r, c)) {
                    -a.rotation[(r, c)]
                } else {
                    a.rotation[(r, c)]
                };
                entries &= f.rotation[(r, c)] == want;
            }
        }
        entries &=
            f.translation == Vector3::new(-a.translation.x, a.translation.y, a.translation.z);
    }
    let k = Intrinsics::new(500.0, 510.0, 300.0, 250.0, 640, 480).unwrap();
    let k_involution = flip_intrinsics(&flip_intrinsics(&k)) == k;
    let k_value = flip_intrinsics(&k).cx == 339.0;
    let t = RigidTransform::from_translation(Vector3::new(1.5, -2.0, 0.25));
    let pure = flip_pose(&t);
    let translation =
        pure.translation == Vector3::new(-1.5, -2.0, 0.25) && pure.rotation == Matrix3::identity();
    let pass =
        involution && k_involution && k_value && homomorphism < 1e-9 && entries && translation;
    (
        pass,
        format!(
            "pose involution exact {involution}, intrinsics involution exact {k_involution} (cx 300 -> 339: {k_value}), \
             homomorphism error {homomorphism:.1e} (< 1e-9), sign pattern exact {}",
            entries && translation
        ),
    )
}

fn cli_flipcheck(scene: &str, rig: &str, extra: &[&str]) -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "crossview".to_string(),
        "flipcheck".into(),
        "--scene".into(),
        configs().join(scene).display().to_string(),
        "--rig".into(),
        configs().join(rig).display().to_string(),
        "--out".into(),
        dir.path().display().to_string(),
    ];
    args.extend(extra.iter().map(|s| s.to_string()));
    let o = run_from(args).unwrap();
    (o.passed, o.summary)
}

/// Loss through the mirrored bundle equals the original; skipping the pose
/// flip breaks it.
fn flip_equivariance() -> (bool, String) {
    let start = Instant::now();
    let (two, two_detail) = cli_flipcheck("plane.toml", "rig_2cam.toml", &[]);
    let (six, six_detail) = cli_flipcheck("room.toml", "rig_6cam.toml", &[]);
    let (neg2, _) = cli_flipcheck("plane.toml", "rig_2cam.toml", &["--skip-pose-flip"]);
    let (neg6, neg_detail) = cli_flipcheck("room.toml", "rig_6cam.toml", &["--skip-pose-flip"]);
    let elapsed = start.elapsed();
    let pass = two && six && !neg2 && !neg6 && within(elapsed, 10.0);
    (
        pass,
        format!(
            "2-camera [{two_detail}], 6-camera [{six_detail}] (< 1e-6); negative controls fail: {} [{neg_detail}]; \
             {:.2} s (< 10 s)",
            !neg2 && !neg6,
            elapsed.as_secs_f64()
        ),
    )
}

fn plane_sequence(distance: f64, yaw_deg: f64, slope: f64, seed: u64, rig: &CameraRig) -> Sequence {
    let scene = tilted_plane(distance, yaw_deg, slope, seed, (0.25, 0.6)).unwrap();
    let mut step = RigidTransform::from_yaw(2f64.to_radians());
    step.translation = Vector3::new(0.05, 0.0, 0.5);
    make_sequence(&scene, rig, &EgoMotion::constant(step), 3).unwrap()
}

fn filled(seq: &Sequence, step: usize) -> Vec<DepthMap> {
    crossview::cli::filled_depths(seq, step).unwrap()
}

/// Reconstruction error, DDCL and MVRCL at ground truth.
fn warp_fidelity() -> (bool, String) {
    let scenes = [
        (
            "tilted plane, 2 cameras",
            make_rig(2, 30.0, 90.0, 96, 64).unwrap(),
            (10.0, 15.0, 0.5, 7),
        ),
        (
            "oblique plane, 3 cameras",
            make_rig(3, 30.0, 90.0, 96, 64).unwrap(),
            (12.0, 30.0, 0.3, 3),
        ),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, rig, (d, yaw, slope, seed)) in scenes {
        let seq = plane_sequence(d, yaw, slope, seed, &rig);
        let bundle = seq.bundle(1).unwrap();
        let depths = filled(&seq, 1);
        let r = reconstruction_errors(&bundle, &depths).unwrap();
        let report = total_loss(&bundle, &depths, &LossConfig::default()).unwrap();
        let mut all: Vec<f64> = depths
            .iter()
            .flat_map(|d| d.data().iter().copied())
            .collect();
        let scale = lower_median(&mut all).unwrap();
        let ok = r.temporal < 2e-3
            && r.spatial < 2e-3
            && r.spatiotemporal < 2e-3
            && report.ddcl.value < 1e-3 * scale
            && report.mvrcl.value < 2e-3
            && report.spatial.pixels > 0
            && report.ddcl.pixels > 0;
        pass &= ok;
        parts.push(format!(
            "{name}: temporal {:.1e}, spatial {:.1e}, spatial-temporal {:.1e} (< 2e-3), DDCL {:.1e} (< {:.1e}), \
             MVRCL {:.1e} (< 2e-3)",
            r.temporal,
            r.spatial,
            r.spatiotemporal,
            report.ddcl.value,
            1e-3 * scale,
            report.mvrcl.value
        ));
    }
    (pass, parts.join("; "))
}

fn count_dense_and_forward(
    rig: &CameraRig,
    seq: &Sequence,
    target: usize,
    source: usize,
) -> (usize, usize) {
    let gt = seq.depths(0);
    let (kt, ks) = (rig.intrinsics(target), rig.intrinsics(source));
    let (moved, _) = transform_depth(&gt[source], &rig.relative(source, target), ks);
    let (_, dense) =
        project_depth_dense(&gt[target], &moved, &rig.relative(target, source), kt, ks);
    let (_, forward) = forward_warp_depth(&gt[source], &rig.relative(source, target), ks, kt);
    (dense.count(), forward.count())
}

/// Backward (dense) projection covers at least as much as forward splatting.
fn density_dominance() -> (bool, String) {
    let start = Instant::now();
    let rig = make_rig(2, 30.0, 90.0, 96, 64).unwrap();
    let seq = plane_sequence(10.0, 15.0, 0.5, 7, &rig);
    let (d01, f01) = count_dense_and_forward(&rig, &seq, 0, 1);
    let (d10, f10) = count_dense_and_forward(&rig, &seq, 1, 0);
    // magnifying: the source camera has half the resolution of the target
    let low = Intrinsics::from_fov(90.0, 48, 32).unwrap();
    let cams = vec![
        *rig.camera(0),
        Camera {
            intrinsics: low,
            extrinsic: *rig.extrinsic(1),
        },
    ];
    let mag_rig = CameraRig::new(cams).unwrap();
    let mag_seq = plane_sequence(10.0, 15.0, 0.5, 7, &mag_rig);
    let (dm, fm) = count_dense_and_forward(&mag_rig, &mag_seq, 0, 1);
    let elapsed = start.elapsed();
    let pass = d01 >= f01 && d10 >= f10 && dm > fm && within(elapsed, 5.0);
    (
        pass,
        format!(
            "dense vs forward: 1->0 {d01} >= {f01}, 0->1 {d10} >= {f10}; magnifying {dm} > {fm}; {:.2} s (< 5 s)",
            elapsed.as_secs_f64()
        ),
    )
}

/// Every term's analytic gradient against central differences.
fn gradient_correctness() -> (bool, String) {
    let start = Instant::now();
    let rig = make_rig(2, 30.0, 90.0, 96, 64).unwrap();
    let seq = plane_sequence(10.0, 15.0, 0.5, 7, &rig);
    let (bundle, depths) = gradcheck_point(&seq.bundle(1).unwrap(), &filled(&seq, 1)).unwrap();
    let options = GradcheckOptions::default();
    let reports = check_loss_gradients(&bundle, &depths, 0.85, &options).unwrap();
    let elapsed = start.elapsed();
    let mut pass = within(elapsed, 60.0) && reports.len() == 9;
    let mut parts = Vec::new();
    for r in &reports {
        let min = if r.label.ends_with("pose") {
            options.pose_probes
        } else {
            options.probes
        };
        pass &= r.passes(1e-4, min);
        parts.push(format!(
            "{} {:.1e}/{}",
            r.label,
            r.max_relative_error,
            r.probes.len()
        ));
    }
    (
        pass,
        format!(
            "max relative error / probes: {} (< 1e-4, >= {} depth probes per term); {:.1} s (< 60 s)",
            parts.join(", "),
            options.probes,
            elapsed.as_secs_f64()
        ),
    )
}

fn experiment(scene: &str) -> (Sequence, crossview::config::SceneSpec, CameraRig) {
    let spec = load_scene(&configs().join(scene)).unwrap();
    let rig = load_rig(&configs().join("rig_2cam.toml")).unwrap();
    let seq = make_sequence(
        &spec.build_scene(spec.seed).unwrap(),
        &rig,
        &spec.ego,
        spec.steps,
    )
    .unwrap();
    (seq, spec, rig)
}

/// Worst relative rise between consecutive entries of the window-10
/// moving average of the total loss.
fn worst_smoothed_rise(rec: &Recovery) -> f64 {
    let totals: Vec<f64> = rec.history.iter().map(|h| h.total).collect();
    smoothed(&totals, 10)
        .windows(2)
        .map(|w| (w[1] - w[0]) / w[0])
        .fold(f64::MIN, f64::max)
}

/// Spatial terms recover metric scale; temporal-only supervision cannot.
fn scale_recovery() -> (bool, String) {
    let start = Instant::now();
    let (seq, spec, _) = experiment("plane.toml");
    let config = OptimConfig {
        seed: spec.seed,
        ..spec.optimize
    };
    let spatial =
        recover_depth(&seq, spec.center, &spec.loss, &config, &spec.init, spec.cap).unwrap();
    let temporal_config = OptimConfig {
        terms: TermSwitches::temporal_only(),
        ..config
    };
    let temporal = recover_depth(
        &seq,
        spec.center,
        &spec.loss,
        &temporal_config,
        &spec.init,
        spec.cap,
    )
    .unwrap();
    let elapsed = start.elapsed();
    let entered = spatial
        .history
        .iter()
        .find(|h| (h.median_ratio - 1.0).abs() <= 0.05)
        .map_or(usize::MAX, |h| h.iteration);
    let spatial_ok =
        config.iterations <= 2000 && Verdict::of(&spatial, 0.05, 0.05) == Verdict::ScaleAware;
    let temporal_ok = Verdict::of(&temporal, 0.05, 0.05) == Verdict::ScaleAmbiguous
        && temporal.last.terms[0] < 2e-3;
    let pass = spatial_ok && temporal_ok && within(elapsed, 120.0);
    (
        pass,
        format!(
            "spatial: init ratio {:.3} -> {:.4} after {} iterations (in [0.95, 1.05] from iteration {entered}), \
             smoothed-loss worst rise {:.2e}; temporal-only: ratio {:.4} (outside [0.95, 1.05]), L_t {:.1e}, \
             median-scaled Abs Rel {:.4} (< 0.05), worst rise {:.2e}; {:.1} s (< 120 s)",
            spatial.history[0].median_ratio,
            spatial.last.median_ratio,
            config.iterations,
            worst_smoothed_rise(&spatial),
            temporal.last.median_ratio,
            temporal.last.terms[0],
            temporal.last.abs_rel_scaled,
            worst_smoothed_rise(&temporal),
            elapsed.as_secs_f64()
        ),
    )
}

/// DDCL halves (at least) the converged inter-view disagreement.
fn ddcl_ablation() -> (bool, String) {
    let start = Instant::now();
    let (seq, spec, rig) = experiment("ablation.toml");
    let run = |ddcl: bool| {
        let mut config = OptimConfig {
            seed: spec.seed,
            ..spec.optimize
        };
        config.terms.ddcl = ddcl;
        let rec =
            recover_depth(&seq, spec.center, &spec.loss, &config, &spec.init, spec.cap).unwrap();
        inter_view_disagreement(&rec.depths, &rig).unwrap()
    };
    let with = run(true);
    let without = run(false);
    let elapsed = start.elapsed();
    let ratio = with / without;
    (
        ratio <= 0.5 && within(elapsed, 120.0),
        format!(
            "disagreement with DDCL {with:.3e}, without {without:.3e}, ratio {ratio:.3} (<= 0.5); {:.1} s (< 120 s)",
            elapsed.as_secs_f64()
        ),
    )
}

/// Scalar-loop oracle for the metrics.
fn oracle_metrics(pred: &DepthMap, gt: &DepthMap, mask: &Mask, cap: f64) -> [f64; 6] {
    let (mut n, mut a, mut sq, mut rm) = (0.0, 0.0, 0.0, 0.0);
    let mut d = [0.0; 3];
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            let g = *gt.get(x, y);
            if !*mask.get(x, y) || g <= 0.0 || g > cap {
                continue;
            }
            let p = pred.get(x, y).max(1e-3).min(cap);
            n += 1.0;
            a += (p - g).abs() / g;
            sq += (p - g) * (p - g) / g;
            rm += (p - g) * (p - g);
            let r = if p / g > g / p { p / g } else { g / p };
            for (k, t) in [1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25].iter().enumerate() {
                if r < *t {
                    d[k] += 1.0;
                }
            }
        }
    }
    [a / n, sq / n, (rm / n).sqrt(), d[0] / n, d[1] / n, d[2] / n]
}

fn metrics_suite() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0.0f64;
    let mut exact_invariance = true;
    for _ in 0..200 {
        let gt = DepthMap::from_fn(4, 4, |_, _| rng.random_range(0.5..60.0));
        let pred = DepthMap::from_fn(4, 4, |_, _| rng.random_range(0.1..90.0));
        let mask = Mask::from_fn(4, 4, |_, _| rng.random_bool(0.8));
        if mask.count() == 0 {
            continue;
        }
        let got = depth_metrics(&pred, &gt, &mask, 50.0).unwrap().values();
        let want = oracle_metrics(&pred, &gt, &mask, 50.0);
        for (g, w) in got.iter().zip(want) {
            worst = worst.max((g - w).abs());
        }
        let c = 2f64.powi(rng.random_range(-4..=4));
        let (a, _) = median_scale(&pred, &gt, &mask).unwrap();
        let (b, _) = median_scale(&pred.map(|v| v * c), &gt, &mask).unwrap();
        exact_invariance &= depth_metrics(&a, &gt, &mask, 1e6).unwrap()
            == depth_metrics(&b, &gt, &mask, 1e6).unwrap();
    }
    let gt = DepthMap::from_fn(4, 4, |x, y| 1.0 + x as f64 + 3.0 * y as f64);
    let perfect = depth_metrics(&gt, &gt, &Mask::filled(4, 4, true), 80.0)
        .unwrap()
        .values()
        == [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
    (
        worst <= 1e-12 && exact_invariance && perfect,
        format!(
            "oracle max difference {worst:.1e} (<= 1e-12) on 200 random 4x4 grids; median-scaled metrics unchanged \
             under power-of-two rescaling: {exact_invariance}; pred = gt gives (0, 0, 0, 1, 1, 1): {perfect}"
        ),
    )
}

fn manifest_of(args: &[&str], out: &Path) -> String {
    let mut v: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    v.push("--out".into());
    v.push(out.display().to_string());
    let o = run_from(v).unwrap();
    std::fs::read_to_string(o.manifest).unwrap()
}

/// Reruns with identical seeds give identical manifests.
fn determinism() -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let scene = configs().join("plane.toml").display().to_string();
    let room = configs().join("room.toml").display().to_string();
    let rig2 = configs().join("rig_2cam.toml").display().to_string();
    let rig6 = configs().join("rig_6cam.toml").display().to_string();
    let render = |s: &str, r: &str, tag: &str| {
        manifest_of(
            &[
                "crossview",
                "render",
                "--scene",
                s,
                "--rig",
                r,
                "--seed",
                "5",
            ],
            &dir.path().join(tag),
        )
    };
    let optimize = |tag: &str| {
        manifest_of(
            &[
                "crossview",
                "optimize",
                "--scene",
                &scene,
                "--rig",
                &rig2,
                "--seed",
                "5",
                "--iters",
                "25",
            ],
            &dir.path().join(tag),
        )
    };
    let (r1, r2) = (render(&scene, &rig2, "r1"), render(&scene, &rig2, "r2"));
    let (s1, s2) = (render(&room, &rig6, "s1"), render(&room, &rig6, "s2"));
    let other = render(&scene, &rig2, "r3")
        != manifest_of(
            &[
                "crossview",
                "render",
                "--scene",
                &scene,
                "--rig",
                &rig2,
                "--seed",
                "6",
            ],
            &dir.path().join("r4"),
        );
    let (o1, o2) = (optimize("o1"), optimize("o2"));
    let files = |m: &str| m.lines().count();
    (
        r1 == r2 && s1 == s2 && o1 == o2 && other,
        format!(
            "render manifests identical: {} ({} files), {} ({} files); optimize manifests identical: {} ({} files); \
             a different seed changes the render manifest: {other}",
            r1 == r2,
            files(&r1),
            s1 == s2,
            files(&s1),
            o1 == o2,
            files(&o1)
        ),
    )
}

fn main() {
    // `cargo test -- --list` and filters: this target has no sub-tests.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut v = Verdicts { lines: Vec::new() };
    v.record(1, "geometry oracle", geometry_oracle);
    v.record(2, "flip algebra", flip_algebra);
    v.record(3, "end-to-end flip equivariance", flip_equivariance);
    v.record(4, "warp fidelity at ground truth", warp_fidelity);
    v.record(5, "density dominance", density_dominance);
    v.record(6, "gradient correctness", gradient_correctness);
    v.record(7, "scale recovery", scale_recovery);
    v.record(8, "DDCL ablation", ddcl_ablation);
    v.record(9, "metrics unit suite", metrics_suite);
    v.record(10, "determinism", determinism);
    let failed = v.lines.iter().filter(|(p, _)| !p).count();
    println!(
        "acceptance: {} passed, {failed} failed",
        v.lines.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
