//! The `crossview` command line.
//!
//! Every command writes into `--out` and finishes by writing
//! `manifest.sha256`: one `<sha256 hex>  <file name>` line per artifact,
//! sorted by name (the layout `sha256sum -c` accepts). `run.toml` records the
//! command, seed and inputs. Exit status is 0 when every checked tolerance
//! holds, 1 when one fails, 2 on errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{load_rig, load_scene, SceneSpec};
use crate::error::{Error, Result};
use crate::eval::{inter_view_disagreement, median_ratio, region_report, DepthMetrics};
use crate::formats::{encode_pfm, encode_ppm};
use crate::grad::{check_loss_gradients, gradcheck_point, reports_to_toml, GradcheckOptions};
use crate::imaging::{DepthMap, Grid, Image, Mask};
use crate::losses::{reconstruction_errors, total_loss, SurroundBundle, Term};
use crate::optimize::{recover_depth, write_history_csv, Recovery};
use crate::rig::CameraRig;
use crate::synth::{make_sequence, Sequence};

#[derive(Debug, Parser)]
#[command(
    name = "crossview",
    version,
    about = "Synthetic surround-depth loss checks and depth recovery"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Scene file (TOML).
    #[arg(long)]
    pub scene: PathBuf,
    /// Rig file (TOML).
    #[arg(long)]
    pub rig: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the scene file's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TermArg {
    #[value(alias = "s", alias = "L_s")]
    Spatial,
    #[value(alias = "st", alias = "L_st")]
    SpatioTemporal,
    #[value(alias = "smooth", alias = "L_smooth")]
    Smoothness,
    #[value(alias = "L_DDCL")]
    Ddcl,
    #[value(alias = "L_MVRCL")]
    Mvrcl,
}

impl From<TermArg> for Term {
    fn from(t: TermArg) -> Term {
        match t {
            TermArg::Spatial => Term::Spatial,
            TermArg::SpatioTemporal => Term::SpatioTemporal,
            TermArg::Smoothness => Term::Smoothness,
            TermArg::Ddcl => Term::Ddcl,
            TermArg::Mvrcl => Term::Mvrcl,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render every camera at every step: PPM images and PFM depths.
    Render(Common),
    /// Loss terms and reconstruction errors at ground truth.
    Losscheck {
        #[command(flatten)]
        common: Common,
        /// Multiplies the ground-truth depths before evaluating.
        #[arg(long, default_value_t = 1.0)]
        perturb: f64,
        /// Bound on every photometric term and reconstruction error.
        #[arg(long, default_value_t = 2e-3)]
        tol_photo: f64,
        /// Bound on DDCL relative to the median ground-truth depth.
        #[arg(long, default_value_t = 1e-3)]
        tol_ddcl: f64,
    },
    /// Analytic loss gradients against central differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-4)]
        tol_grad: f64,
        /// Depth probes per term.
        #[arg(long, default_value_t = 200)]
        probes: usize,
        /// Pose probes per pose-dependent term.
        #[arg(long, default_value_t = 24)]
        pose_probes: usize,
    },
    /// Loss equality between a bundle and its horizontal mirror.
    Flipcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-6)]
        tol_flip: f64,
        /// Leave the temporal poses unflipped (expected to fail).
        #[arg(long)]
        skip_pose_flip: bool,
        /// Mirror the mirrored bundle again before evaluating.
        #[arg(long, conflicts_with = "skip_pose_flip")]
        double_flip: bool,
    },
    /// Depth recovery by gradient descent.
    Optimize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        enable: Vec<TermArg>,
        #[arg(long, value_delimiter = ',')]
        disable: Vec<TermArg>,
        #[arg(long)]
        hflip_prob: Option<f64>,
        /// Evaluation depth cap in meters.
        #[arg(long)]
        cap: Option<f64>,
        /// Allowed distance of the median ratio from 1.
        #[arg(long, default_value_t = 0.05)]
        tol_scale: f64,
        /// Bound on median-scaled Abs Rel.
        #[arg(long, default_value_t = 0.05)]
        tol_abs_rel: f64,
    },
}

/// What a command concluded.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub passed: bool,
    pub summary: String,
    pub manifest: PathBuf,
}

/// Files written by a command, hashed as they go.
struct Outputs {
    dir: PathBuf,
    hashes: Vec<(String, String)>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            hashes: Vec::new(),
        })
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.hashes
            .push((name.to_string(), hex::encode(Sha256::digest(bytes))));
        Ok(())
    }

    fn finish(mut self) -> Result<PathBuf> {
        self.hashes.sort();
        let text: String = self
            .hashes
            .iter()
            .map(|(n, h)| format!("{h}  {n}\n"))
            .collect();
        let path = self.dir.join("manifest.sha256");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    command: &'a str,
    seed: u64,
    scene: String,
    rig: String,
}

struct Experiment {
    spec: SceneSpec,
    rig: CameraRig,
    seed: u64,
    sequence: Sequence,
}

fn prepare(common: &Common, command: &str, out: &mut Outputs) -> Result<Experiment> {
    let spec = load_scene(&common.scene)?;
    let rig = load_rig(&common.rig)?;
    let seed = common.seed.unwrap_or(spec.seed);
    let scene = spec.build_scene(seed)?;
    let sequence = make_sequence(&scene, &rig, &spec.ego, spec.steps)?;
    let record = RunRecord {
        command,
        seed,
        scene: common.scene.display().to_string(),
        rig: common.rig.display().to_string(),
    };
    out.put(
        "run.toml",
        toml::to_string(&record)
            .expect("run record serializes")
            .as_bytes(),
    )?;
    Ok(Experiment {
        spec,
        rig,
        seed,
        sequence,
    })
}

fn toml_text<T: Serialize>(value: &T) -> String {
    toml::to_string(value).expect("report serializes")
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from<I, T>(args: I) -> Result<Outcome>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    run(cli)
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Render(common) => render(&common),
        Command::Losscheck {
            common,
            perturb,
            tol_photo,
            tol_ddcl,
        } => losscheck(&common, perturb, tol_photo, tol_ddcl),
        Command::Gradcheck {
            common,
            tol_grad,
            probes,
            pose_probes,
        } => gradcheck(&common, tol_grad, probes, pose_probes),
        Command::Flipcheck {
            common,
            tol_flip,
            skip_pose_flip,
            double_flip,
        } => flipcheck(&common, tol_flip, skip_pose_flip, double_flip),
        Command::Optimize {
            common,
            iters,
            lr,
            enable,
            disable,
            hflip_prob,
            cap,
            tol_scale,
            tol_abs_rel,
        } => {
            let overrides = OptimizeOverrides {
                iters,
                lr,
                enable,
                disable,
                hflip_prob,
                cap,
            };
            optimize(&common, &overrides, tol_scale, tol_abs_rel)
        }
    }
}

fn render(common: &Common) -> Result<Outcome> {
    let mut out = Outputs::new(&common.out)?;
    let ex = prepare(common, "render", &mut out)?;
    for (k, step) in ex.sequence.renders.iter().enumerate() {
        for (i, r) in step.iter().enumerate() {
            out.put(&format!("step{k}_cam{i}.ppm"), &encode_ppm(&r.image))?;
            out.put(&format!("step{k}_cam{i}.pfm"), &encode_pfm(&r.depth))?;
        }
    }
    let files = ex.sequence.steps() * ex.rig.len();
    Ok(Outcome {
        passed: true,
        summary: format!("rendered {files} views (seed {})", ex.seed),
        manifest: out.finish()?,
    })
}

/// Depth maps with invalid (sky) pixels filled by the median valid depth,
/// so every pixel carries a usable hypothesis.
pub fn filled_depths(sequence: &Sequence, step: usize) -> Result<Vec<DepthMap>> {
    let gt = sequence.depths(step);
    let valid = sequence.valid_masks(step);
    let mut all: Vec<f64> = gt
        .iter()
        .zip(&valid)
        .flat_map(|(d, m)| {
            d.data()
                .iter()
                .zip(m.data())
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
        })
        .collect();
    let fill = crate::eval::lower_median(&mut all).ok_or(Error::EmptyMask)?;
    Ok(gt
        .iter()
        .zip(&valid)
        .map(|(d, m)| {
            Grid::from_fn(d.width(), d.height(), |x, y| {
                if *m.get(x, y) {
                    *d.get(x, y)
                } else {
                    fill
                }
            })
        })
        .collect())
}

#[derive(Serialize)]
struct CheckRow {
    name: String,
    value: f64,
    limit: f64,
    pass: bool,
}

fn check(name: &str, value: f64, limit: f64) -> CheckRow {
    CheckRow {
        name: name.into(),
        value,
        limit,
        pass: value < limit,
    }
}

fn losscheck(common: &Common, perturb: f64, tol_photo: f64, tol_ddcl: f64) -> Result<Outcome> {
    if !(perturb.is_finite() && perturb > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "--perturb must be positive, got {perturb}"
        )));
    }
    let mut out = Outputs::new(&common.out)?;
    let ex = prepare(common, "losscheck", &mut out)?;
    let bundle = ex.sequence.bundle(ex.spec.center)?;
    let gt = filled_depths(&ex.sequence, ex.spec.center)?;
    let depths: Vec<DepthMap> = gt.iter().map(|d| d.map(|v| v * perturb)).collect();
    let report = total_loss(&bundle, &depths, &ex.spec.loss)?;
    let recon = reconstruction_errors(&bundle, &depths)?;
    let mut all: Vec<f64> = gt.iter().flat_map(|d| d.data().iter().copied()).collect();
    let depth_scale = crate::eval::lower_median(&mut all).ok_or(Error::EmptyMask)?;
    let mut rows = vec![
        check("warp_temporal", recon.temporal, tol_photo),
        check("warp_spatial", recon.spatial, tol_photo),
        check("warp_spatiotemporal", recon.spatiotemporal, tol_photo),
    ];
    for t in [
        Term::Temporal,
        Term::Spatial,
        Term::SpatioTemporal,
        Term::Mvrcl,
    ] {
        rows.push(check(t.name(), report.term(t).value, tol_photo));
    }
    rows.push(check(
        Term::Ddcl.name(),
        report.ddcl.value,
        tol_ddcl * depth_scale,
    ));
    let passed = rows.iter().all(|r| r.pass);
    #[derive(Serialize)]
    struct Doc {
        perturb: f64,
        depth_scale: f64,
        passed: bool,
        check: Vec<CheckRow>,
    }
    let doc = Doc {
        perturb,
        depth_scale,
        passed,
        check: rows,
    };
    out.put("losscheck.toml", toml_text(&doc).as_bytes())?;
    out.put("losses.toml", report.to_toml().as_bytes())?;
    let failed: Vec<&str> = doc
        .check
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.name.as_str())
        .collect();
    Ok(Outcome {
        passed,
        summary: if passed {
            format!(
                "all {} checks pass (total {:.6e})",
                doc.check.len(),
                report.total
            )
        } else {
            format!("failing: {}", failed.join(", "))
        },
        manifest: out.finish()?,
    })
}

fn gradcheck(common: &Common, tol_grad: f64, probes: usize, pose_probes: usize) -> Result<Outcome> {
    let mut out = Outputs::new(&common.out)?;
    let ex = prepare(common, "gradcheck", &mut out)?;
    let bundle = ex.sequence.bundle(ex.spec.center)?;
    let (bundle, depths) = gradcheck_point(&bundle, &filled_depths(&ex.sequence, ex.spec.center)?)?;
    let options = GradcheckOptions {
        probes,
        pose_probes,
        seed: ex.seed,
        ..GradcheckOptions::default()
    };
    let reports = check_loss_gradients(&bundle, &depths, ex.spec.loss.alpha, &options)?;
    out.put(
        "gradcheck.toml",
        reports_to_toml(&reports, tol_grad).as_bytes(),
    )?;
    let failing: Vec<String> = reports
        .iter()
        .filter(|r| {
            let want = if r.label.ends_with("pose") {
                pose_probes
            } else {
                probes
            };
            !r.passes(tol_grad, want)
        })
        .map(|r| {
            format!(
                "{} ({:.3e}, {} probes)",
                r.label,
                r.max_relative_error,
                r.probes.len()
            )
        })
        .collect();
    let worst = reports
        .iter()
        .map(|r| r.max_relative_error)
        .fold(0.0, f64::max);
    Ok(Outcome {
        passed: failing.is_empty(),
        summary: if failing.is_empty() {
            format!(
                "{} checks pass, worst relative error {worst:.3e}",
                reports.len()
            )
        } else {
            format!("failing: {}", failing.join(", "))
        },
        manifest: out.finish()?,
    })
}

/// Total loss at ground truth on the bundle and on its mirror image.
pub fn flip_losses(
    bundle: &SurroundBundle,
    depths: &[DepthMap],
    loss: &crate::losses::LossConfig,
    skip_pose_flip: bool,
    double_flip: bool,
) -> Result<(f64, f64)> {
    let original = total_loss(bundle, depths, loss)?.total;
    let mut flipped = bundle.hflip_with(!skip_pose_flip);
    let mut flipped_depths: Vec<DepthMap> = depths.iter().map(Grid::hflip).collect();
    if double_flip {
        flipped = flipped.hflip();
        flipped_depths = flipped_depths.iter().map(Grid::hflip).collect();
    }
    Ok((original, total_loss(&flipped, &flipped_depths, loss)?.total))
}

fn flipcheck(
    common: &Common,
    tol_flip: f64,
    skip_pose_flip: bool,
    double_flip: bool,
) -> Result<Outcome> {
    let mut out = Outputs::new(&common.out)?;
    let ex = prepare(common, "flipcheck", &mut out)?;
    let bundle = ex.sequence.bundle(ex.spec.center)?;
    let depths = filled_depths(&ex.sequence, ex.spec.center)?;
    let (original, flipped) =
        flip_losses(&bundle, &depths, &ex.spec.loss, skip_pose_flip, double_flip)?;
    let relative = (flipped - original).abs() / original.abs().max(f64::MIN_POSITIVE);
    let passed = relative < tol_flip;
    #[derive(Serialize)]
    struct Doc {
        skip_pose_flip: bool,
        double_flip: bool,
        original: f64,
        flipped: f64,
        relative_difference: f64,
        tolerance: f64,
        passed: bool,
    }
    let doc = Doc {
        skip_pose_flip,
        double_flip,
        original,
        flipped,
        relative_difference: relative,
        tolerance: tol_flip,
        passed,
    };
    out.put("flipcheck.toml", toml_text(&doc).as_bytes())?;
    Ok(Outcome {
        passed,
        summary: format!(
            "original {original:.9e}, flipped {flipped:.9e}, relative difference {relative:.3e}"
        ),
        manifest: out.finish()?,
    })
}

/// Command-line adjustments to the scene file's optimizer settings.
#[derive(Debug, Clone, Default)]
pub struct OptimizeOverrides {
    pub iters: Option<usize>,
    pub lr: Option<f64>,
    pub enable: Vec<TermArg>,
    pub disable: Vec<TermArg>,
    pub hflip_prob: Option<f64>,
    pub cap: Option<f64>,
}

/// Full-scale value of the error-map images (Abs Rel mapped to white).
pub const ERROR_MAP_FULL_SCALE: f64 = 0.1;

fn error_map(pred: &DepthMap, gt: &DepthMap, valid: &Mask) -> Image {
    Grid::from_fn(pred.width(), pred.height(), |x, y| {
        let g = *gt.get(x, y);
        if !*valid.get(x, y) || g <= 0.0 {
            return [0.0, 0.0, 0.5];
        }
        let e = ((pred.get(x, y) - g).abs() / g / ERROR_MAP_FULL_SCALE).min(1.0);
        [e, e, e]
    })
}

fn metrics_row(camera: &str, region: &str, m: &DepthMetrics) -> Vec<String> {
    let mut row = vec![camera.to_string(), region.to_string()];
    row.extend(m.values().iter().map(f64::to_string));
    row
}

fn optimize(
    common: &Common,
    overrides: &OptimizeOverrides,
    tol_scale: f64,
    tol_abs_rel: f64,
) -> Result<Outcome> {
    let mut out = Outputs::new(&common.out)?;
    let ex = prepare(common, "optimize", &mut out)?;
    let mut config = ex.spec.optimize;
    config.seed = ex.seed;
    if let Some(n) = overrides.iters {
        config.iterations = n;
    }
    if let Some(lr) = overrides.lr {
        config.learning_rate = lr;
    }
    if let Some(p) = overrides.hflip_prob {
        config.hflip_prob = p;
    }
    for &t in &overrides.enable {
        config.terms.set(t.into(), true)?;
    }
    for &t in &overrides.disable {
        config.terms.set(t.into(), false)?;
    }
    let cap = overrides.cap.unwrap_or(ex.spec.cap);
    let center = ex.spec.center;
    let rec = recover_depth(
        &ex.sequence,
        center,
        &ex.spec.loss,
        &config,
        &ex.spec.init,
        cap,
    )?;

    let mut csv = Vec::new();
    write_history_csv(&rec.history, &mut csv)?;
    out.put("history.csv", &csv)?;
    let gt = ex.sequence.depths(center);
    let valid = ex.sequence.valid_masks(center);
    let mut metrics = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["camera".to_string(), "region".to_string()];
    header.extend(DepthMetrics::FIELDS.iter().map(|s| s.to_string()));
    metrics.write_record(&header)?;
    #[derive(Serialize)]
    struct CameraDoc {
        camera: usize,
        all: DepthMetrics,
        overlap: Option<DepthMetrics>,
    }
    let mut cameras = Vec::new();
    for i in 0..ex.rig.len() {
        out.put(&format!("depth_cam{i}.pfm"), &encode_pfm(&rec.depths[i]))?;
        out.put(
            &format!("error_cam{i}.ppm"),
            &encode_ppm(&error_map(&rec.depths[i], &gt[i], &valid[i])),
        )?;
        let r = region_report(&rec.depths[i], &gt[i], &valid[i], &ex.rig, &gt, i, cap)?;
        metrics.write_record(metrics_row(&i.to_string(), "all", &r.all))?;
        if let Some(o) = &r.overlap {
            metrics.write_record(metrics_row(&i.to_string(), "overlap", o))?;
        }
        cameras.push(CameraDoc {
            camera: i,
            all: r.all,
            overlap: r.overlap,
        });
    }
    let bytes = metrics
        .into_inner()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    out.put("metrics.csv", &bytes)?;

    let verdict = Verdict::of(&rec, tol_scale, tol_abs_rel);
    #[derive(Serialize)]
    struct Doc {
        seed: u64,
        iterations: usize,
        terms: crate::optimize::TermSwitches,
        median_ratio: f64,
        abs_rel: f64,
        abs_rel_scaled: f64,
        final_total: f64,
        inter_view_disagreement: Option<f64>,
        status: &'static str,
        passed: bool,
        error_map_full_scale: f64,
        camera: Vec<CameraDoc>,
    }
    let doc = Doc {
        seed: ex.seed,
        iterations: config.iterations,
        terms: config.terms,
        median_ratio: rec.last.median_ratio,
        abs_rel: rec.last.abs_rel,
        abs_rel_scaled: rec.last.abs_rel_scaled,
        final_total: rec.last.total,
        inter_view_disagreement: inter_view_disagreement(&rec.depths, &ex.rig),
        status: verdict.label(),
        passed: verdict != Verdict::Failed,
        error_map_full_scale: ERROR_MAP_FULL_SCALE,
        camera: cameras,
    };
    out.put("report.toml", toml_text(&doc).as_bytes())?;
    // pooled ratio over the final depths, for the summary line
    let ratio = median_ratio(&rec.depths, &gt, &valid)?;
    Ok(Outcome {
        passed: doc.passed,
        summary: format!(
            "{}: median ratio {ratio:.4}, Abs Rel {:.4}, median-scaled Abs Rel {:.4}",
            doc.status, doc.abs_rel, doc.abs_rel_scaled
        ),
        manifest: out.finish()?,
    })
}

/// Classification of a finished recovery run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// Median ratio within tolerance of 1.
    ScaleAware,
    /// Ratio off, but the shape is right up to a global scale.
    ScaleAmbiguous,
    Failed,
}

impl Verdict {
    pub fn of(rec: &Recovery, tol_scale: f64, tol_abs_rel: f64) -> Verdict {
        if (rec.last.median_ratio - 1.0).abs() <= tol_scale {
            Verdict::ScaleAware
        } else if rec.last.abs_rel_scaled < tol_abs_rel {
            Verdict::ScaleAmbiguous
        } else {
            Verdict::Failed
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Verdict::ScaleAware => "scale-aware",
            Verdict::ScaleAmbiguous => "scale-ambiguous",
            Verdict::Failed => "failed",
        }
    }
}

/// Binary entry point: runs the command and maps the outcome to an exit
/// status.
pub fn main_with_args<I, T>(args: I) -> std::process::ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return std::process::ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(o) => {
            println!("{}", o.summary);
            println!("manifest: {}", o.manifest.display());
            if o.passed {
                std::process::ExitCode::SUCCESS
            } else {
                println!("FAILED");
                std::process::ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::from(2)
        }
    }
}
