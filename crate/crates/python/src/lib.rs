//! Python bindings for the `crossview` crate.
//!
//! Depth maps cross the boundary as lists of rows (`height` lists of `width`
//! floats), so numpy arrays can be passed in directly and turned back into
//! arrays with `numpy.asarray`. Images are rows of `[r, g, b]` triples.

use std::path::PathBuf;

use crossview::config::{load_rig, load_scene, SceneSpec};
use crossview::eval::{depth_metrics as metrics, inter_view_disagreement, DepthMetrics};
use crossview::imaging::{hflip_depth, DepthMap, Grid, Mask};
use crossview::losses::{total_loss as loss, LossConfig, LossReport, SurroundBundle, Term};
use crossview::optimize::{recover_depth as recover, OptimConfig, TermSwitches};
use crossview::rig::{self, CameraRig, RigidTransform as Transform, Twist};
use crossview::synth::{self, make_sequence};
use nalgebra::{Matrix3, Vector3};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: crossview::error::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_rows<T: Clone>(g: &Grid<T>) -> Vec<Vec<T>> {
    g.data().chunks(g.width()).map(|r| r.to_vec()).collect()
}

fn from_rows<T: Clone>(rows: Vec<Vec<T>>) -> PyResult<Grid<T>> {
    let height = rows.len();
    let width = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Grid::from_vec(width, height, rows.concat()).map_err(err)
}

/// A rigid transform `p -> R p + t`.
#[pyclass(module = "crossview", name = "RigidTransform", frozen)]
struct PyTransform(Transform);

#[pymethods]
impl PyTransform {
    #[new]
    #[pyo3(signature = (rotation, translation))]
    fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> PyResult<Self> {
        let r = Matrix3::from_fn(|i, j| rotation[i][j]);
        Transform::new(r, Vector3::from(translation))
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn identity() -> Self {
        Self(Transform::identity())
    }

    /// Rotation about the vertical axis, in radians.
    #[staticmethod]
    fn from_yaw(yaw: f64) -> Self {
        Self(Transform::from_yaw(yaw))
    }

    /// Exponential map of a twist `(rho, omega)`.
    #[staticmethod]
    fn exp(twist: [f64; 6]) -> Self {
        Self(rig::exp_se3(&Twist::from_column_slice(&twist)))
    }

    fn log(&self) -> PyResult<[f64; 6]> {
        let xi = rig::log_se3(&self.0).map_err(err)?;
        Ok(std::array::from_fn(|k| xi[k]))
    }

    fn inverse(&self) -> Self {
        Self(self.0.inverse())
    }

    /// Mirror image under the horizontal image flip.
    fn flip(&self) -> Self {
        Self(rig::flip_pose(&self.0))
    }

    /// Conjugates a vehicle motion into camera `i`'s frame given the
    /// reference extrinsic `e0` and camera extrinsic `ei`.
    fn distribute(&self, e0: &PyTransform, ei: &PyTransform) -> Self {
        Self(rig::distribute_pose(&self.0, &e0.0, &ei.0))
    }

    fn apply(&self, point: [f64; 3]) -> [f64; 3] {
        self.0.transform_point(&Vector3::from(point)).into()
    }

    fn matrix(&self) -> [[f64; 4]; 4] {
        let m = self.0.to_matrix();
        std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))
    }

    fn __mul__(&self, other: &PyTransform) -> Self {
        Self(self.0 * other.0)
    }

    fn __eq__(&self, other: &PyTransform) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        let t = self.0.translation;
        format!("RigidTransform(translation=[{}, {}, {}])", t.x, t.y, t.z)
    }
}

/// Cameras with intrinsics and camera-to-vehicle extrinsics.
#[pyclass(module = "crossview", name = "CameraRig", frozen)]
struct PyRig(CameraRig);

#[pymethods]
impl PyRig {
    /// `cameras` cameras spaced `yaw_step_deg` apart around the vehicle.
    #[staticmethod]
    #[pyo3(signature = (cameras, yaw_step_deg, fov_deg, width, height))]
    fn ring(
        cameras: usize,
        yaw_step_deg: f64,
        fov_deg: f64,
        width: usize,
        height: usize,
    ) -> PyResult<Self> {
        synth::make_rig(cameras, yaw_step_deg, fov_deg, width, height)
            .map(Self)
            .map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_rig(&path).map(Self).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn extrinsic(&self, i: usize) -> PyResult<PyTransform> {
        self.check(i)?;
        Ok(PyTransform(*self.0.extrinsic(i)))
    }

    /// `(fx, fy, cx, cy, width, height)` of camera `i`.
    fn intrinsics(&self, i: usize) -> PyResult<(f64, f64, f64, f64, usize, usize)> {
        self.check(i)?;
        let k = self.0.intrinsics(i);
        Ok((k.fx, k.fy, k.cx, k.cy, k.width, k.height))
    }

    /// Maps points from camera `source`'s frame into camera `target`'s.
    fn relative(&self, source: usize, target: usize) -> PyResult<PyTransform> {
        self.check(source)?;
        self.check(target)?;
        Ok(PyTransform(self.0.relative(source, target)))
    }

    fn neighbors(&self, i: usize) -> PyResult<Vec<usize>> {
        self.check(i)?;
        Ok(self.0.neighbors(i))
    }

    fn flipped(&self) -> Self {
        Self(self.0.flipped())
    }
}

impl PyRig {
    fn check(&self, i: usize) -> PyResult<()> {
        if i < self.0.len() {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!(
                "camera {i} out of range for {} cameras",
                self.0.len()
            )))
        }
    }
}

/// A synthetic scene file: geometry, ego-motion and experiment settings.
#[pyclass(module = "crossview", name = "Scene", frozen)]
struct PyScene(SceneSpec);

#[pymethods]
impl PyScene {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_scene(&path).map(Self).map_err(err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[getter]
    fn center(&self) -> usize {
        self.0.center
    }

    /// Renders the scene through `rig`; `seed` overrides the scene's seed.
    #[pyo3(signature = (rig, seed = None))]
    fn render(&self, rig: &PyRig, seed: Option<u64>) -> PyResult<PySequence> {
        let scene = self
            .0
            .build_scene(seed.unwrap_or(self.0.seed))
            .map_err(err)?;
        let seq = make_sequence(&scene, &rig.0, &self.0.ego, self.0.steps).map_err(err)?;
        let bundle = seq.bundle(self.0.center).map_err(err)?;
        Ok(PySequence {
            seq,
            bundle,
            center: self.0.center,
            rig: rig.0.clone(),
        })
    }

    /// Runs depth recovery with the scene's settings. Keyword overrides:
    /// `iterations`, `seed`, `disable` (term names such as `"L_DDCL"`),
    /// `temporal_only`.
    #[pyo3(signature = (rig, iterations = None, seed = None, disable = Vec::new(), temporal_only = false))]
    fn recover_depth<'py>(
        &self,
        py: Python<'py>,
        rig: &PyRig,
        iterations: Option<usize>,
        seed: Option<u64>,
        disable: Vec<String>,
        temporal_only: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let spec = &self.0;
        let seed = seed.unwrap_or(spec.seed);
        let scene = spec.build_scene(seed).map_err(err)?;
        let seq = make_sequence(&scene, &rig.0, &spec.ego, spec.steps).map_err(err)?;
        let mut config = OptimConfig {
            seed,
            ..spec.optimize
        };
        if let Some(n) = iterations {
            config.iterations = n;
        }
        if temporal_only {
            config.terms = TermSwitches::temporal_only();
        }
        for name in &disable {
            let term = term_named(name)?;
            config.terms.set(term, false).map_err(err)?;
        }
        let rec = py
            .detach(|| recover(&seq, spec.center, &spec.loss, &config, &spec.init, spec.cap))
            .map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("depths", rec.depths.iter().map(to_rows).collect::<Vec<_>>())?;
        out.set_item("median_ratio", rec.last.median_ratio)?;
        out.set_item("abs_rel", rec.last.abs_rel)?;
        out.set_item("abs_rel_scaled", rec.last.abs_rel_scaled)?;
        out.set_item(
            "total",
            rec.history.iter().map(|h| h.total).collect::<Vec<_>>(),
        )?;
        out.set_item(
            "ratio_history",
            rec.history
                .iter()
                .map(|h| h.median_ratio)
                .collect::<Vec<_>>(),
        )?;
        out.set_item(
            "inter_view_disagreement",
            inter_view_disagreement(&rec.depths, &rig.0),
        )?;
        out.set_item("poses", Vec::from(rec.poses.map(PyTransform)))?;
        Ok(out)
    }
}

fn term_named(name: &str) -> PyResult<Term> {
    Term::ALL
        .into_iter()
        .find(|t| t.name().eq_ignore_ascii_case(name))
        .ok_or_else(|| PyValueError::new_err(format!("unknown loss term {name:?}")))
}

/// A rendered sequence and the surround bundle centred on the scene's
/// middle step.
#[pyclass(module = "crossview", name = "Sequence", frozen)]
struct PySequence {
    seq: synth::Sequence,
    bundle: SurroundBundle,
    center: usize,
    rig: CameraRig,
}

#[pymethods]
impl PySequence {
    fn __len__(&self) -> usize {
        self.seq.steps()
    }

    fn depths(&self, step: usize) -> PyResult<Vec<Vec<Vec<f64>>>> {
        self.check(step)?;
        Ok(self.seq.depths(step).iter().map(to_rows).collect())
    }

    fn images(&self, step: usize) -> PyResult<Vec<Vec<Vec<[f64; 3]>>>> {
        self.check(step)?;
        Ok(self.seq.images(step).iter().map(to_rows).collect())
    }

    fn valid_masks(&self, step: usize) -> PyResult<Vec<Vec<Vec<bool>>>> {
        self.check(step)?;
        Ok(self.seq.valid_masks(step).iter().map(to_rows).collect())
    }

    /// Ground-truth depths of the centre step with unseen pixels filled by
    /// the median valid depth.
    fn filled_depths(&self) -> PyResult<Vec<Vec<Vec<f64>>>> {
        Ok(crossview::cli::filled_depths(&self.seq, self.center)
            .map_err(err)?
            .iter()
            .map(to_rows)
            .collect())
    }

    /// Every loss term for a depth hypothesis, one map per camera.
    /// Keyword arguments override loss settings (`alpha`, `lambda_s`, ...).
    #[pyo3(signature = (depths, flipped = false, **settings))]
    fn total_loss<'py>(
        &self,
        py: Python<'py>,
        depths: Vec<Vec<Vec<f64>>>,
        flipped: bool,
        settings: Option<&Bound<'py, PyDict>>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let config = loss_config(settings)?;
        let depths = depth_maps(depths)?;
        let report = if flipped {
            let mirrored: Vec<DepthMap> = depths.iter().map(hflip_depth).collect();
            loss(&self.bundle.hflip(), &mirrored, &config)
        } else {
            loss(&self.bundle, &depths, &config)
        }
        .map_err(err)?;
        report_dict(py, &report)
    }

    /// Mean relative disagreement between overlapping cameras' depths.
    fn inter_view_disagreement(&self, depths: Vec<Vec<Vec<f64>>>) -> PyResult<Option<f64>> {
        Ok(inter_view_disagreement(&depth_maps(depths)?, &self.rig))
    }
}

impl PySequence {
    fn check(&self, step: usize) -> PyResult<()> {
        if step < self.seq.steps() {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!(
                "step {step} out of range for {} steps",
                self.seq.steps()
            )))
        }
    }
}

fn depth_maps(depths: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<DepthMap>> {
    depths.into_iter().map(from_rows).collect()
}

fn loss_config(settings: Option<&Bound<'_, PyDict>>) -> PyResult<LossConfig> {
    let mut config = LossConfig::default();
    if let Some(settings) = settings {
        for (k, v) in settings.iter() {
            let key: String = k.extract()?;
            let value: f64 = v.extract()?;
            let slot = match key.as_str() {
                "alpha" => &mut config.alpha,
                "lambda_s" => &mut config.lambda_s,
                "lambda_st" => &mut config.lambda_st,
                "lambda_smooth" => &mut config.lambda_smooth,
                "lambda_ddcl" => &mut config.lambda_ddcl,
                "lambda_mvrcl" => &mut config.lambda_mvrcl,
                _ => {
                    return Err(PyValueError::new_err(format!(
                        "unknown loss setting {key:?}"
                    )))
                }
            };
            *slot = value;
        }
    }
    config.validate().map_err(err)?;
    Ok(config)
}

fn report_dict<'py>(py: Python<'py>, report: &LossReport) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("total", report.total)?;
    for term in Term::ALL {
        out.set_item(term.name(), report.term(term).value)?;
    }
    Ok(out)
}

/// Abs Rel, Sq Rel, RMSE and the three threshold accuracies over `mask`
/// (all pixels when omitted); predictions are clamped to `[1e-3, cap]`.
#[pyfunction]
#[pyo3(signature = (pred, gt, mask = None, cap = 80.0))]
fn depth_metrics<'py>(
    py: Python<'py>,
    pred: Vec<Vec<f64>>,
    gt: Vec<Vec<f64>>,
    mask: Option<Vec<Vec<bool>>>,
    cap: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let (pred, gt) = (from_rows(pred)?, from_rows(gt)?);
    let mask: Mask = match mask {
        Some(m) => from_rows(m)?,
        None => Mask::filled(gt.width(), gt.height(), true),
    };
    let m = metrics(&pred, &gt, &mask, cap).map_err(err)?;
    let out = PyDict::new(py);
    for (name, value) in DepthMetrics::FIELDS.iter().zip(m.values()) {
        out.set_item(*name, value)?;
    }
    Ok(out)
}

/// Horizontally mirrors a depth map given as rows.
#[pyfunction]
fn hflip(depth: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&hflip_depth(&from_rows(depth)?)))
}

/// Runs a command-line invocation (without the program name) and returns
/// `(passed, summary, manifest_path)`.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> PyResult<(bool, String, PathBuf)> {
    let argv = std::iter::once("crossview".to_string()).chain(args);
    let outcome = py
        .detach(|| crossview::cli::run_from(argv))
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((outcome.passed, outcome.summary, outcome.manifest))
}

#[pymodule]
#[pyo3(name = "crossview")]
fn crossview_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTransform>()?;
    m.add_class::<PyRig>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PySequence>()?;
    m.add_function(wrap_pyfunction!(depth_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(hflip, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
