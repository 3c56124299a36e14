//! Python module `crowdloc`. Structured arguments and results are plain
//! dicts and lists with the same layout as the JSON files the CLI writes.

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyString;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crowdloc::calibration::CalibrationOptions;
use crowdloc::cropping::{solve_layout as solve, CropParams};
use crowdloc::formats::{AnnotationFile, ReconstructionFile, SceneFile, TruthFile};
use crowdloc::geometry::{CameraIntrinsics, GroundPlane, Pixel, Point3, Vec3};
use crowdloc::hvip::locate_pixels;
use crowdloc::metrics::{self, EvaluationOptions};
use crowdloc::pipeline::{self, AblationSpec, CropConfig, CropMode, SceneConfig};
use crowdloc::simulate::{generate, render_annotations, RenderNoise, SceneSpec};

create_exception!(crowdloc, CrowdlocError, PyException, "Library error; `exit_code` matches the CLI.");

fn py_err(e: crowdloc::Error) -> PyErr {
    let code = e.exit_code();
    let message = e.to_string();
    let err = match e {
        crowdloc::Error::Io { .. } => PyOSError::new_err(message),
        crowdloc::Error::Config(_) | crowdloc::Error::Parse { .. } => PyValueError::new_err(message),
        _ => CrowdlocError::new_err(message),
    };
    Python::attach(|py| {
        let _ = err.value(py).setattr("exit_code", code);
    });
    err
}

/// Accepts a JSON string or any `json.dumps`-able object.
fn from_py<T: DeserializeOwned>(value: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = if value.is_instance_of::<PyString>() {
        value.extract()?
    } else {
        value.py().import("json")?.call_method1("dumps", (value,))?.extract()?
    };
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn points(list: Vec<[f64; 3]>) -> Vec<Point3> {
    list.into_iter().map(|p| Point3::new(p[0], p[1], p[2])).collect()
}

/// Synthetic scene for a spec dict (defaults when omitted): `(annotations, truth)`.
#[pyfunction]
#[pyo3(signature = (spec=None))]
fn simulate(py: Python<'_>, spec: Option<&Bound<'_, PyAny>>) -> PyResult<(Py<PyAny>, Py<PyAny>)> {
    let spec: SceneSpec = spec.map(from_py).transpose()?.unwrap_or_default();
    let scene = generate(&spec).map_err(py_err)?;
    let ann = render_annotations(&scene, &RenderNoise::from_spec(&spec)).map_err(py_err)?;
    Ok((to_py(py, &ann)?, to_py(py, &scene.truth().map_err(py_err)?)?))
}

/// Row count, ratio and block sizes for crop parameters.
#[pyfunction]
fn solve_layout(py: Python<'_>, params: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
    let params: CropParams = from_py(params)?;
    to_py(py, &solve(&params).map_err(py_err)?)
}

/// Patch grid from explicit parameters or estimated from annotations.
#[pyfunction]
#[pyo3(signature = (annotations, params=None, uniform=None))]
fn crop(py: Python<'_>, annotations: &Bound<'_, PyAny>, params: Option<&Bound<'_, PyAny>>, uniform: Option<u32>) -> PyResult<Py<PyAny>> {
    let ann: AnnotationFile = from_py(annotations)?;
    let params: Option<CropParams> = params.map(from_py).transpose()?;
    let mode = if params.is_some() { CropMode::Manual } else { CropMode::Auto };
    let config = CropConfig { mode, params, uniform_block: uniform };
    to_py(py, &pipeline::crop_stage(&ann, &config, "").map_err(py_err)?)
}

#[pyfunction]
#[pyo3(signature = (annotations, height_prior=None, tau=0.5))]
fn calibrate(py: Python<'_>, annotations: &Bound<'_, PyAny>, height_prior: Option<f64>, tau: f64) -> PyResult<Py<PyAny>> {
    let ann: AnnotationFile = from_py(annotations)?;
    let mut options = CalibrationOptions::default();
    if let Some(h) = height_prior {
        options.height_prior = h;
    }
    to_py(py, &pipeline::calibrate_stage(&ann, &options, tau, "").map_err(py_err)?)
}

/// Lifts a torso pixel and its HVIP pixel to 3D.
#[pyfunction]
fn locate(
    py: Python<'_>,
    camera: (f64, f64, f64),
    normal: [f64; 3],
    offset: f64,
    torso_px: (f64, f64),
    hvip_px: (f64, f64),
) -> PyResult<Py<PyAny>> {
    let k = CameraIntrinsics::new(camera.0, camera.1, camera.2).map_err(py_err)?;
    let g = GroundPlane::new(Vec3::new(normal[0], normal[1], normal[2]), offset).map_err(py_err)?;
    let (hvip_m, d, torso_m) =
        locate_pixels(Pixel::new(torso_px.0, torso_px.1), Pixel::new(hvip_px.0, hvip_px.1), &k, &g).map_err(py_err)?;
    let out = serde_json::json!({ "hvip_m": hvip_m, "torso_height": d, "torso_m": torso_m });
    to_py(py, &out)
}

#[pyfunction]
fn localize(py: Python<'_>, scene: &Bound<'_, PyAny>, annotations: &Bound<'_, PyAny>, patches: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
    let scene: SceneFile = from_py(scene)?;
    let ann: AnnotationFile = from_py(annotations)?;
    let patches = from_py(patches)?;
    let (r, _) = pipeline::localize_stage(&scene, &ann, &patches, 1, "").map_err(py_err)?;
    to_py(py, &r)
}

#[pyfunction]
#[pyo3(signature = (reconstruction, radius_factor=0.5, use_3d=false))]
fn merge(py: Python<'_>, reconstruction: &Bound<'_, PyAny>, radius_factor: f64, use_3d: bool) -> PyResult<Py<PyAny>> {
    let r: ReconstructionFile = from_py(reconstruction)?;
    let config = crowdloc::merging::MergeConfig { match_radius_factor: radius_factor, use_3d };
    to_py(py, &pipeline::merge_stage(&r, &config, "").map_err(py_err)?)
}

#[pyfunction]
fn evaluate(py: Python<'_>, reconstruction: &Bound<'_, PyAny>, truth: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
    let r: ReconstructionFile = from_py(reconstruction)?;
    let t: TruthFile = from_py(truth)?;
    to_py(py, &pipeline::evaluate_stage(&r, &t, &EvaluationOptions::default()))
}

/// Full crop → calibrate → localize → merge (→ evaluate) run.
#[pyfunction]
#[pyo3(signature = (annotations, config=None, truth=None, workers=None))]
fn run_pipeline(
    py: Python<'_>,
    annotations: &Bound<'_, PyAny>,
    config: Option<&Bound<'_, PyAny>>,
    truth: Option<&Bound<'_, PyAny>>,
    workers: Option<usize>,
) -> PyResult<Py<PyAny>> {
    let ann: AnnotationFile = from_py(annotations)?;
    let config: SceneConfig = config.map(from_py).transpose()?.unwrap_or_default();
    let truth: Option<TruthFile> = truth.map(from_py).transpose()?;
    let workers = pipeline::resolve_workers(workers).map_err(py_err)?;
    let out = py
        .detach(|| pipeline::run_pipeline(&config, &ann, truth.as_ref(), workers))
        .map_err(py_err)?;
    to_py(py, &out)
}

/// Calibration error rows for each person count.
#[pyfunction]
#[pyo3(signature = (spec=None, workers=None))]
fn ablation(py: Python<'_>, spec: Option<&Bound<'_, PyAny>>, workers: Option<usize>) -> PyResult<Py<PyAny>> {
    let spec: AblationSpec = spec.map(from_py).transpose()?.unwrap_or_default();
    let workers = pipeline::resolve_workers(workers).map_err(py_err)?;
    let rows = py.detach(|| pipeline::emit_ablation_curves(&spec, workers)).map_err(py_err)?;
    to_py(py, &rows)
}

#[pyfunction]
fn ppds(est: Vec<[f64; 3]>, gt: Vec<[f64; 3]>) -> PyResult<f64> {
    Ok(metrics::ppds(&points(est), &points(gt)).map_err(py_err)?.value)
}

#[pyfunction]
fn pa_ppds(est: Vec<[f64; 3]>, gt: Vec<[f64; 3]>) -> PyResult<f64> {
    Ok(metrics::pa_ppds(&points(est), &points(gt)).map_err(py_err)?.0.value)
}

/// Percentage of correctly ordered depth pairs.
#[pyfunction]
fn pcod(est: Vec<[f64; 3]>, gt: Vec<[f64; 3]>) -> PyResult<f64> {
    Ok(metrics::pcod(&points(est), &points(gt)).map_err(py_err)?.value)
}

#[pymodule(name = "crowdloc")]
fn crowdloc_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("CrowdlocError", m.py().get_type::<CrowdlocError>())?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(solve_layout, m)?)?;
    m.add_function(wrap_pyfunction!(crop, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate, m)?)?;
    m.add_function(wrap_pyfunction!(locate, m)?)?;
    m.add_function(wrap_pyfunction!(localize, m)?)?;
    m.add_function(wrap_pyfunction!(merge, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(ablation, m)?)?;
    m.add_function(wrap_pyfunction!(ppds, m)?)?;
    m.add_function(wrap_pyfunction!(pa_ppds, m)?)?;
    m.add_function(wrap_pyfunction!(pcod, m)?)?;
    Ok(())
}
