//! Python bindings for the detector, scene generator and metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use eon_core::detector::{
    detect, load_checkpoint, read_manifest, train, DetectorConfig, Detection, Model, Precision,
};
use eon_core::evalkit::{average_precision, equivariance_probe, evaluate};
use eon_core::geometry::{rotated_iou, OrientedBox};
use eon_core::rotgroup::{shift_orbit, CyclicGroup as CoreGroup};
use eon_core::scenegen::{generate_scene as core_generate, load_scene, save_scene, Scene as CoreScene, SceneGenConfig};
use eon_core::EonError;

fn err(e: EonError) -> PyErr {
    match e {
        EonError::NonFinite { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_or_default<T: serde::de::DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    json.map_or_else(|| Ok(T::default()), |s| serde_json::from_str(s).map_err(json_err))
}

type BoxTuple = ([f64; 3], [f64; 3], f64);

fn to_box((center, size, yaw): BoxTuple) -> PyResult<OrientedBox> {
    OrientedBox::new(center, size, yaw, 0).map_err(err)
}

/// Cyclic rotation group about the vertical axis.
#[pyclass(module = "eon", frozen)]
struct CyclicGroup {
    inner: CoreGroup,
}

#[pymethods]
impl CyclicGroup {
    #[new]
    fn new(order: usize) -> PyResult<Self> {
        Ok(Self {
            inner: CoreGroup::new(order).map_err(err)?,
        })
    }

    #[getter]
    fn order(&self) -> usize {
        self.inner.order()
    }

    fn angles(&self) -> Vec<f64> {
        self.inner.angles()
    }

    fn compose(&self, a: usize, b: usize) -> PyResult<usize> {
        let ea = self.inner.element(a).map_err(err)?;
        let eb = self.inner.element(b).map_err(err)?;
        Ok(ea.compose(&eb).map_err(err)?.index())
    }

    fn inverse(&self, a: usize) -> PyResult<usize> {
        Ok(self.inner.element(a).map_err(err)?.inverse().index())
    }

    fn angle_to_bin(&self, angle: f64) -> PyResult<usize> {
        Ok(self.inner.angle_to_bin(angle).map_err(err)?.index())
    }

    /// Moves slot `g` of a length-N orbit to slot `element ∘ g`.
    fn shift_orbit(&self, orbit: Vec<f64>, element: usize) -> PyResult<Vec<f64>> {
        let e = self.inner.element(element).map_err(err)?;
        shift_orbit(&orbit, &e).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("CyclicGroup({})", self.inner.order())
    }
}

/// Synthetic scene with per-point labels and ground-truth boxes.
#[pyclass(module = "eon", from_py_object)]
#[derive(Clone)]
struct Scene {
    inner: CoreScene,
}

#[pymethods]
impl Scene {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_scene(&path, None).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_scene(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn group_order(&self) -> usize {
        self.inner.group_order
    }

    #[getter]
    fn points(&self) -> Vec<[f64; 3]> {
        self.inner.points.clone()
    }

    #[getter]
    fn object_id(&self) -> Vec<i64> {
        self.inner.object_id.clone()
    }

    #[getter]
    fn foreground(&self) -> Vec<bool> {
        self.inner.labels.foreground.clone()
    }

    #[getter]
    fn orientation_bin(&self) -> Vec<i64> {
        self.inner.labels.orientation_bin.clone()
    }

    /// Ground-truth boxes as dicts with center, size, yaw and class_id.
    fn boxes<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.inner.gt_boxes.iter().map(|b| box_dict(py, b)).collect()
    }

    /// Copy with one object rotated about its box axis by `angle`.
    fn rotate_object(&self, object_id: usize, angle: f64) -> PyResult<Self> {
        let (s, c) = angle.sin_cos();
        Ok(Self {
            inner: self.inner.rotate_object(object_id, angle, c, s).map_err(err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn box_dict<'py>(py: Python<'py>, b: &OrientedBox) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("center", b.center)?;
    d.set_item("size", b.size)?;
    d.set_item("yaw", b.yaw)?;
    d.set_item("class_id", b.class_id)?;
    d.set_item("score", b.score)?;
    Ok(d)
}

fn detection_dict<'py>(py: Python<'py>, d: &Detection) -> PyResult<Bound<'py, PyDict>> {
    let out = box_dict(py, &d.bbox)?;
    out.set_item("low_confidence", d.low_confidence)?;
    out.set_item("region", d.region)?;
    out.set_item("orientation", d.orientation.index())?;
    Ok(out)
}

enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
}

macro_rules! with_model {
    ($m:expr, $v:ident => $body:expr) => {
        match $m {
            AnyModel::F32($v) => $body,
            AnyModel::F64($v) => $body,
        }
    };
}

/// Detector of any variant, at the configured precision.
#[pyclass(module = "eon")]
struct Detector {
    model: AnyModel,
}

fn build(cfg: &DetectorConfig) -> PyResult<AnyModel> {
    Ok(match cfg.precision {
        Precision::F32 => AnyModel::F32(Model::new(cfg).map_err(err)?),
        Precision::F64 => AnyModel::F64(Model::new(cfg).map_err(err)?),
    })
}

#[pymethods]
impl Detector {
    /// Freshly initialized detector from a JSON detector config.
    #[new]
    #[pyo3(signature = (config_json = None))]
    fn new(config_json: Option<&str>) -> PyResult<Self> {
        let cfg: DetectorConfig = parse_or_default(config_json)?;
        Ok(Self { model: build(&cfg)? })
    }

    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        let manifest = read_manifest(&checkpoint).map_err(err)?;
        let model = match manifest.config.precision {
            Precision::F32 => AnyModel::F32(load_checkpoint(&checkpoint).map_err(err)?.0),
            Precision::F64 => AnyModel::F64(load_checkpoint(&checkpoint).map_err(err)?.0),
        };
        Ok(Self { model })
    }

    /// Trains from scratch on `scenes`, writing into `out_dir`.
    #[staticmethod]
    #[pyo3(signature = (scenes, out_dir, config_json = None, workers = 1))]
    fn train(py: Python<'_>, scenes: Vec<Scene>, out_dir: PathBuf, config_json: Option<&str>, workers: usize) -> PyResult<Self> {
        let cfg: DetectorConfig = parse_or_default(config_json)?;
        let scenes: Vec<CoreScene> = scenes.into_iter().map(|s| s.inner).collect();
        let checkpoint = py
            .detach(|| match cfg.precision {
                Precision::F32 => train::<f32>(&cfg, &scenes, &out_dir, workers),
                Precision::F64 => train::<f64>(&cfg, &scenes, &out_dir, workers),
            })
            .map_err(err)?
            .checkpoint;
        Self::load(checkpoint)
    }

    #[getter]
    fn variant(&self) -> String {
        with_model!(&self.model, m => m.cfg.variant.name().to_string())
    }

    #[getter]
    fn group_order(&self) -> usize {
        with_model!(&self.model, m => m.group.order())
    }

    fn parameter_count(&self) -> usize {
        with_model!(&self.model, m => m.parameter_count())
    }

    fn config_json(&self) -> PyResult<String> {
        with_model!(&self.model, m => serde_json::to_string(&m.cfg).map_err(json_err))
    }

    /// Detections after suppression.
    fn detect<'py>(&self, py: Python<'py>, scene: &Scene) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let dets = with_model!(&self.model, m => detect(m, &scene.inner)).map_err(err)?;
        dets.iter().map(|d| detection_dict(py, d)).collect()
    }

    /// Evaluation report as JSON.
    #[pyo3(signature = (scenes, thresholds = vec![0.25, 0.5]))]
    fn evaluate(&self, scenes: Vec<Scene>, thresholds: Vec<f64>) -> PyResult<String> {
        let scenes: Vec<CoreScene> = scenes.into_iter().map(|s| s.inner).collect();
        let report = with_model!(&self.model, m => evaluate(m, &scenes, &thresholds, 1)).map_err(err)?;
        serde_json::to_string(&report).map_err(json_err)
    }

    /// Equivariance probe for one object as JSON.
    fn probe(&self, scene: &Scene, object_id: usize) -> PyResult<String> {
        let report = with_model!(&self.model, m => equivariance_probe(m, &scene.inner, object_id)).map_err(err)?;
        serde_json::to_string(&report).map_err(json_err)
    }
}

/// Generates one scene from an optional JSON scene config.
#[pyfunction]
#[pyo3(signature = (seed, config_json = None))]
fn generate_scene(seed: u64, config_json: Option<&str>) -> PyResult<Scene> {
    let cfg: SceneGenConfig = parse_or_default(config_json)?;
    Ok(Scene {
        inner: core_generate(&cfg, seed).map_err(err)?,
    })
}

/// Scene config with well-separated grid-yaw objects and no clutter.
#[pyfunction]
fn isolated_scene_config(group_order: usize, gap: f64) -> PyResult<String> {
    serde_json::to_string(&SceneGenConfig::isolated(group_order, gap)).map_err(json_err)
}

/// 3D IoU of two upright boxes given as `(center, size, yaw)`.
#[pyfunction(name = "rotated_iou")]
fn py_rotated_iou(a: BoxTuple, b: BoxTuple) -> PyResult<f64> {
    Ok(rotated_iou(&to_box(a)?, &to_box(b)?))
}

#[pyfunction(name = "average_precision")]
fn py_average_precision(flags: Vec<bool>, scores: Vec<f64>, num_gt: usize) -> PyResult<f64> {
    if flags.len() != scores.len() {
        return Err(PyValueError::new_err("flags and scores differ in length"));
    }
    Ok(average_precision(&flags, &scores, num_gt))
}

#[pymodule]
fn eon(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<CyclicGroup>()?;
    m.add_class::<Scene>()?;
    m.add_class::<Detector>()?;
    m.add_function(wrap_pyfunction!(generate_scene, m)?)?;
    m.add_function(wrap_pyfunction!(isolated_scene_config, m)?)?;
    m.add_function(wrap_pyfunction!(py_rotated_iou, m)?)?;
    m.add_function(wrap_pyfunction!(py_average_precision, m)?)?;
    Ok(())
}
