//! The window-10 moving average of the total loss should never rise over an
//! acceptance run. Checked strictly; see the notes printed on failure.

use std::path::Path;

use crossview::config::{load_rig, load_scene};
use crossview::optimize::{recover_depth, smoothed, OptimConfig, TermSwitches};
use crossview::synth::make_sequence;

fn rises(scene: &str, adjust: impl FnOnce(&mut OptimConfig)) -> Vec<(usize, f64)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let spec = load_scene(&dir.join(scene)).unwrap();
    let rig = load_rig(&dir.join("rig_2cam.toml")).unwrap();
    let seq = make_sequence(
        &spec.build_scene(spec.seed).unwrap(),
        &rig,
        &spec.ego,
        spec.steps,
    )
    .unwrap();
    let mut config = OptimConfig {
        seed: spec.seed,
        ..spec.optimize
    };
    adjust(&mut config);
    let rec = recover_depth(&seq, spec.center, &spec.loss, &config, &spec.init, spec.cap).unwrap();
    let totals: Vec<f64> = rec.history.iter().map(|h| h.total).collect();
    smoothed(&totals, 10)
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] > w[0])
        .map(|(i, w)| (i + 1, (w[1] - w[0]) / w[0]))
        .collect()
}

fn assert_non_increasing(found: Vec<(usize, f64)>) {
    let worst = found.iter().map(|r| r.1).fold(0.0, f64::max);
    let first: Vec<_> = found
        .iter()
        .take(5)
        .map(|(i, r)| format!("{i}: {r:.1e}"))
        .collect();
    assert!(
        found.is_empty(),
        "{} rises of the smoothed loss, worst relative rise {worst:.2e}; first at {}",
        found.len(),
        first.join(", ")
    );
}

#[test]
fn scale_recovery_run_is_monotone() {
    assert_non_increasing(rises("plane.toml", |_| {}));
}

#[test]
fn temporal_only_run_is_monotone() {
    assert_non_increasing(rises("plane.toml", |c| {
        c.terms = TermSwitches::temporal_only()
    }));
}

#[test]
fn ablation_runs_are_monotone() {
    assert_non_increasing(rises("ablation.toml", |_| {}));
    assert_non_increasing(rises("ablation.toml", |c| c.terms.ddcl = false));
}
