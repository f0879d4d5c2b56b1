//! TOML rig and scene files.
//!
//! A rig file holds either a `[ring]` table (cameras evenly yawed on a
//! circle) or a list of `[[camera]]` tables:
//!
//! ```toml
//! [[camera]]
//! fx = 48.0
//! fy = 48.0
//! cx = 47.5
//! cy = 31.5
//! width = 96
//! height = 64
//! # camera-to-vehicle, row-major
//! extrinsic = [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 1], [0, 0, 0, 1]]
//! ```
//!
//! A scene file lists planes (`[[plane]]`, `[tilted_plane]`, `[room]`), the
//! per-step ego motion, and optional `[loss]`, `[optimize]` and `[init]`
//! overrides. Every error names the file, line and column.

use std::ops::Range;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix4, Vector3};
use serde::Deserialize;
use toml::Spanned;

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::optimize::{Initialization, OptimConfig};
use crate::rig::{Camera, CameraRig, Intrinsics, RigidTransform, ROTATION_TOLERANCE};
use crate::synth::{make_rig, tilted_plane, EgoMotion, PlanarScene, Texture, TexturedPlane};

/// 1-based line and column of a byte offset.
pub fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before
        .rfind('\n')
        .map_or(before.len(), |nl| before.len() - nl - 1)
        + 1;
    (line, col)
}

/// A parse or validation failure located in `text`.
fn located(
    path: &Path,
    text: &str,
    span: Option<Range<usize>>,
    message: impl std::fmt::Display,
) -> Error {
    let detail = match span {
        Some(r) => {
            let (line, col) = line_col(text, r.start);
            format!("line {line}, column {col}: {message}")
        }
        None => message.to_string(),
    };
    Error::Parse {
        path: path.to_path_buf(),
        detail,
    }
}

fn parse<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| located(path, text, e.span(), e.message()))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RingSpec {
    cameras: usize,
    yaw_step_deg: f64,
    fov_deg: f64,
    width: usize,
    height: usize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraSpec {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    extrinsic: [[f64; 4]; 4],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RigFile {
    ring: Option<Spanned<RingSpec>>,
    #[serde(default)]
    camera: Vec<Spanned<CameraSpec>>,
}

pub fn parse_rig(path: &Path, text: &str) -> Result<CameraRig> {
    let file: RigFile = parse(path, text)?;
    match (file.ring, file.camera.is_empty()) {
        (Some(_), false) => Err(located(
            path,
            text,
            None,
            "give either [ring] or [[camera]] entries, not both",
        )),
        (None, true) => Err(located(
            path,
            text,
            None,
            "no cameras: add a [ring] table or [[camera]] entries",
        )),
        (Some(ring), true) => {
            let span = ring.span();
            let r = ring.into_inner();
            make_rig(r.cameras, r.yaw_step_deg, r.fov_deg, r.width, r.height)
                .map_err(|e| located(path, text, Some(span), e))
        }
        (None, false) => {
            let mut cameras = Vec::new();
            for (i, c) in file.camera.into_iter().enumerate() {
                let span = c.span();
                let c = c.into_inner();
                let fail =
                    |e: Error| located(path, text, Some(span.clone()), format!("camera {i}: {e}"));
                let intrinsics =
                    Intrinsics::new(c.fx, c.fy, c.cx, c.cy, c.width, c.height).map_err(fail)?;
                let m = Matrix4::from_fn(|r, k| c.extrinsic[r][k]);
                let extrinsic =
                    RigidTransform::from_matrix(&m, ROTATION_TOLERANCE).map_err(fail)?;
                cameras.push(Camera {
                    intrinsics,
                    extrinsic,
                });
            }
            CameraRig::new(cameras).map_err(|e| located(path, text, None, e))
        }
    }
}

pub fn load_rig(path: &Path) -> Result<CameraRig> {
    parse_rig(path, &read_text(path)?)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextureSpec {
    /// Explicit `[a, b, c, d]` per channel.
    coeffs: Option<[[f64; 4]; 3]>,
    seed: Option<u64>,
    #[serde(default = "default_freq")]
    freq: [f64; 2],
}

fn default_freq() -> [f64; 2] {
    [0.25, 0.6]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlaneSpec {
    point: [f64; 3],
    normal: [f64; 3],
    texture: TextureSpec,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TiltedPlaneSpec {
    distance: f64,
    #[serde(default)]
    yaw_deg: f64,
    #[serde(default)]
    slope: f64,
    seed: Option<u64>,
    #[serde(default = "default_freq")]
    freq: [f64; 2],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoomSpec {
    half_width: f64,
    half_length: f64,
    ceiling: f64,
    floor: f64,
    seed: Option<u64>,
    #[serde(default = "default_freq")]
    freq: [f64; 2],
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EgoSpec {
    #[serde(default)]
    yaw_deg: f64,
    #[serde(default)]
    translation: [f64; 3],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_steps")]
    steps: usize,
    center: Option<usize>,
    #[serde(default = "default_cap")]
    cap: f64,
    #[serde(default)]
    ego: EgoSpec,
    tilted_plane: Option<Spanned<TiltedPlaneSpec>>,
    room: Option<Spanned<RoomSpec>>,
    #[serde(default)]
    plane: Vec<Spanned<PlaneSpec>>,
    #[serde(default)]
    loss: LossConfig,
    #[serde(default)]
    optimize: OptimConfig,
    #[serde(default)]
    init: Initialization,
}

fn default_steps() -> usize {
    3
}

fn default_cap() -> f64 {
    80.0
}

/// A parsed scene file.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub path: PathBuf,
    /// Experiment seed; seeds textures that do not carry their own.
    pub seed: u64,
    pub steps: usize,
    pub center: usize,
    /// Evaluation depth cap in meters.
    pub cap: f64,
    pub ego: EgoMotion,
    pub loss: LossConfig,
    pub optimize: OptimConfig,
    pub init: Initialization,
    planes: Vec<PlaneSource>,
}

#[derive(Debug, Clone, PartialEq)]
enum PlaneSource {
    Tilted {
        distance: f64,
        yaw_deg: f64,
        slope: f64,
        seed: Option<u64>,
        freq: (f64, f64),
    },
    Room {
        half_width: f64,
        half_length: f64,
        ceiling: f64,
        floor: f64,
        seed: Option<u64>,
        freq: (f64, f64),
    },
    Explicit {
        point: Vector3<f64>,
        normal: Vector3<f64>,
        coeffs: Option<[[f64; 4]; 3]>,
        seed: Option<u64>,
        freq: (f64, f64),
    },
}

impl SceneSpec {
    /// Builds the planes; `seed` stands in for every texture seed the file
    /// leaves out (offset by the plane's position in the file).
    pub fn build_scene(&self, seed: u64) -> Result<PlanarScene> {
        let mut planes = Vec::new();
        for (k, source) in self.planes.iter().enumerate() {
            let pick = |s: &Option<u64>| s.unwrap_or(seed.wrapping_add(k as u64));
            match source {
                PlaneSource::Tilted {
                    distance,
                    yaw_deg,
                    slope,
                    seed,
                    freq,
                } => planes
                    .extend(tilted_plane(*distance, *yaw_deg, *slope, pick(seed), *freq)?.planes),
                PlaneSource::Room {
                    half_width,
                    half_length,
                    ceiling,
                    floor,
                    seed,
                    freq,
                } => planes.extend(
                    PlanarScene::room(
                        *half_width,
                        *half_length,
                        *ceiling,
                        *floor,
                        pick(seed),
                        *freq,
                    )?
                    .planes,
                ),
                PlaneSource::Explicit {
                    point,
                    normal,
                    coeffs,
                    seed,
                    freq,
                } => {
                    let texture = match coeffs {
                        Some(c) => Texture { coeffs: *c },
                        None => {
                            use rand::SeedableRng;
                            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(pick(seed));
                            Texture::random(&mut rng, freq.0, freq.1)
                        }
                    };
                    planes.push(TexturedPlane::new(*point, *normal, texture)?);
                }
            }
        }
        PlanarScene::new(planes)
    }
}

fn check_freq(freq: [f64; 2]) -> std::result::Result<(f64, f64), String> {
    if freq[0] > 0.0 && freq[0] <= freq[1] && freq[1].is_finite() {
        Ok((freq[0], freq[1]))
    } else {
        Err(format!(
            "texture frequencies must satisfy 0 < lo <= hi, got {freq:?}"
        ))
    }
}

pub fn parse_scene(path: &Path, text: &str) -> Result<SceneSpec> {
    let file: SceneFile = parse(path, text)?;
    let err = |span: Option<Range<usize>>, msg: String| located(path, text, span, msg);
    let mut planes = Vec::new();
    if let Some(t) = file.tilted_plane {
        let span = t.span();
        let t = t.into_inner();
        if !(t.distance > 0.0) {
            return Err(err(
                Some(span),
                format!("tilted_plane.distance must be positive, got {}", t.distance),
            ));
        }
        planes.push(PlaneSource::Tilted {
            distance: t.distance,
            yaw_deg: t.yaw_deg,
            slope: t.slope,
            seed: t.seed,
            freq: check_freq(t.freq).map_err(|m| err(Some(span), m))?,
        });
    }
    if let Some(r) = file.room {
        let span = r.span();
        let r = r.into_inner();
        if !(r.half_width > 0.0 && r.half_length > 0.0 && r.ceiling < r.floor) {
            return Err(err(
                Some(span),
                "room needs positive half extents and ceiling above floor (ceiling < floor, y down)".into(),
            ));
        }
        planes.push(PlaneSource::Room {
            half_width: r.half_width,
            half_length: r.half_length,
            ceiling: r.ceiling,
            floor: r.floor,
            seed: r.seed,
            freq: check_freq(r.freq).map_err(|m| err(Some(span), m))?,
        });
    }
    for p in file.plane {
        let span = p.span();
        let p = p.into_inner();
        let normal = Vector3::from(p.normal);
        if !(normal.norm() > 0.0) {
            return Err(err(Some(span), "plane normal must be non-zero".into()));
        }
        planes.push(PlaneSource::Explicit {
            point: Vector3::from(p.point),
            normal,
            coeffs: p.texture.coeffs,
            seed: p.texture.seed,
            freq: check_freq(p.texture.freq).map_err(|m| err(Some(span), m))?,
        });
    }
    if planes.is_empty() {
        return Err(err(None, "scene has no planes".into()));
    }
    if file.steps < 3 {
        return Err(err(
            None,
            format!("steps must be at least 3, got {}", file.steps),
        ));
    }
    let center = file.center.unwrap_or(file.steps / 2);
    if center == 0 || center + 1 >= file.steps {
        return Err(err(
            None,
            format!("center {center} needs a step on both sides"),
        ));
    }
    if !(file.cap > crate::eval::MIN_DEPTH) {
        return Err(err(None, format!("cap must be positive, got {}", file.cap)));
    }
    file.loss
        .validate()
        .map_err(|e| err(None, format!("[loss]: {e}")))?;
    file.optimize
        .validate()
        .map_err(|e| err(None, format!("[optimize]: {e}")))?;
    let mut step = RigidTransform::from_yaw(file.ego.yaw_deg.to_radians());
    step.translation = Vector3::from(file.ego.translation);
    Ok(SceneSpec {
        path: path.to_path_buf(),
        seed: file.seed,
        steps: file.steps,
        center,
        cap: file.cap,
        ego: EgoMotion::constant(step),
        loss: file.loss,
        optimize: file.optimize,
        init: file.init,
        planes,
    })
}

pub fn load_scene(path: &Path) -> Result<SceneSpec> {
    parse_scene(path, &read_text(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("test.toml")
    }

    #[test]
    fn line_and_column() {
        let t = "a = 1\nbb = 2\n";
        assert_eq!(line_col(t, 0), (1, 1));
        assert_eq!(line_col(t, 6), (2, 1));
        assert_eq!(line_col(t, 9), (2, 4));
    }

    #[test]
    fn ring_rig_matches_generator() {
        let rig = parse_rig(
            p(),
            "[ring]\ncameras = 6\nyaw_step_deg = 60.0\nfov_deg = 90.0\nwidth = 32\nheight = 24\n",
        )
        .unwrap();
        assert_eq!(rig, make_rig(6, 60.0, 90.0, 32, 24).unwrap());
    }

    #[test]
    fn explicit_cameras() {
        let text = "\
[[camera]]
fx = 20.0
fy = 21.0
cx = 7.5
cy = 5.5
width = 16
height = 12
extrinsic = [[1, 0, 0, 0.5], [0, 1, 0, 0], [0, 0, 1, 1], [0, 0, 0, 1]]
";
        let rig = parse_rig(p(), text).unwrap();
        assert_eq!(rig.len(), 1);
        assert_eq!(rig.intrinsics(0).fy, 21.0);
        assert_eq!(rig.extrinsic(0).translation, Vector3::new(0.5, 0.0, 1.0));
    }

    #[test]
    fn bad_rotation_points_at_the_camera() {
        let text = "\
[[camera]]
fx = 20.0
fy = 20.0
cx = 7.5
cy = 5.5
width = 16
height = 12
extrinsic = [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]

[[camera]]
fx = 20.0
fy = 20.0
cx = 7.5
cy = 5.5
width = 16
height = 12
extrinsic = [[2, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]
";
        let e = parse_rig(p(), text).unwrap_err().to_string();
        assert!(e.starts_with("test.toml: line 10"), "{e}");
        assert!(e.contains("camera 1"), "{e}");
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let e = parse_rig(p(), "[ring]\ncameras = 2\nfov_deg = oops\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 3"), "{e}");
        let e = parse_rig(p(), "[ring]\ncameras = 2\nyaw_step_deg = 1.0\nfov_deg = 90.0\nwidth = 8\nheight = 8\nextra = 1\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 7") && e.contains("extra"), "{e}");
        assert!(parse_rig(p(), "").is_err());
    }

    #[test]
    fn scene_file_round_trip() {
        let text = "\
seed = 7
steps = 3
[ego]
yaw_deg = 2.0
translation = [0.05, 0.0, 0.5]
[tilted_plane]
distance = 10.0
yaw_deg = 15.0
slope = 0.5
[loss]
lambda_smooth = 0.001
[optimize]
learning_rate = 0.02
";
        let s = parse_scene(p(), text).unwrap();
        assert_eq!((s.seed, s.steps, s.center, s.cap), (7, 3, 1, 80.0));
        assert_eq!(s.loss.lambda_smooth, 1e-3);
        assert_eq!(s.loss.lambda_s, 0.03);
        assert_eq!(s.optimize.learning_rate, 0.02);
        assert_eq!(s.optimize.beta1, 0.9);
        assert_eq!(
            s.build_scene(7).unwrap(),
            tilted_plane(10.0, 15.0, 0.5, 7, (0.25, 0.6)).unwrap()
        );
        assert_ne!(s.build_scene(8).unwrap(), s.build_scene(7).unwrap());
    }

    #[test]
    fn scene_errors() {
        let e = parse_scene(p(), "steps = 3\n").unwrap_err().to_string();
        assert!(e.contains("no planes"), "{e}");
        let e = parse_scene(p(), "steps = 2\n[tilted_plane]\ndistance = 5.0\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("at least 3"), "{e}");
        let e = parse_scene(p(), "[tilted_plane]\ndistance = -5.0\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 1"), "{e}");
        let e = parse_scene(
            p(),
            "[room]\nhalf_width = 5.0\nhalf_length = 5.0\nceiling = 2.0\nfloor = -1.0\n",
        )
        .unwrap_err()
        .to_string();
        assert!(e.contains("ceiling"), "{e}");
        let e = parse_scene(
            p(),
            "[tilted_plane]\ndistance = 5.0\n[optimize]\nhflip_prob = 2.0\n",
        )
        .unwrap_err()
        .to_string();
        assert!(e.contains("hflip_prob"), "{e}");
    }

    #[test]
    fn explicit_plane_with_coefficients() {
        let text = "\
[[plane]]
point = [0.0, 0.0, 6.0]
normal = [0.0, 0.0, -1.0]
texture = { coeffs = [[1, 0, 1, 0], [0.5, 1, 0.5, 1], [2, 0, 2, 0]] }
";
        let s = parse_scene(p(), text).unwrap();
        let scene = s.build_scene(0).unwrap();
        assert_eq!(scene.planes.len(), 1);
        assert_eq!(scene.planes[0].texture.coeffs[2], [2.0, 0.0, 2.0, 0.0]);
    }
}
