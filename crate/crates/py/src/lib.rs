//! Python bindings: body model, scenes, fitting, rendering, metrics and the
//! gradient checks. Images and point sets cross the boundary as flat lists;
//! reports come back as dictionaries.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use gst_core::body_model::{forward_lbs, PoseParams, ShapeParams, SyntheticBodyConfig};
use gst_core::dataio::{GenerateOptions, RigConfig};
use gst_core::fitting::{FitInit, FitOptions};
use gst_core::gaussian::ScaffoldConfig;
use gst_core::pipeline::Avatar;
use gst_core::Error;

fn to_py(e: Error) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else if matches!(e, Error::Io { .. }) {
        PyIOError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

/// Converts any serializable report into Python objects via JSON.
fn to_object<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn matrix_rows(m: &nalgebra::Matrix3<f64>) -> [f64; 9] {
    std::array::from_fn(|k| m[(k / 3, k % 3)])
}

#[pyclass(module = "gst_py", frozen)]
struct BodyModel {
    inner: gst_core::body_model::BodyModel,
}

#[pymethods]
impl BodyModel {
    /// Procedural humanoid with the standard 24-joint skeleton.
    #[staticmethod]
    #[pyo3(signature = (vertices = 6890, shape_dim = 10, seed = 7))]
    fn synthetic(vertices: usize, shape_dim: usize, seed: u64) -> PyResult<Self> {
        let inner = SyntheticBodyConfig {
            vertices,
            shape_dim,
            seed,
            ..Default::default()
        }
        .build()
        .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: gst_core::body_model::read_body_model(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        gst_core::body_model::write_body_model(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn num_vertices(&self) -> usize {
        self.inner.num_vertices()
    }

    #[getter]
    fn num_joints(&self) -> usize {
        self.inner.num_joints()
    }

    #[getter]
    fn num_betas(&self) -> usize {
        self.inner.num_betas()
    }

    /// Posed `(vertices, joints)` from row-major 3x3 joint rotations, shape
    /// coefficients and a root translation. Omitted arguments mean rest pose,
    /// mean shape and no translation.
    #[pyo3(signature = (rotations = None, betas = None, translation = [0.0; 3]))]
    fn forward(
        &self,
        rotations: Option<Vec<[f64; 9]>>,
        betas: Option<Vec<f64>>,
        translation: [f64; 3],
    ) -> PyResult<(Vec<[f64; 3]>, Vec<[f64; 3]>)> {
        let mut pose = PoseParams::identity(self.inner.num_joints());
        if let Some(rs) = rotations {
            pose.joint_rotations = rs.iter().map(|r| nalgebra::Matrix3::from_row_slice(r)).collect();
        }
        pose.root_translation = translation.into();
        let shape = match betas {
            Some(b) => ShapeParams::new(b).map_err(to_py)?,
            None => ShapeParams::zeros(self.inner.num_betas()),
        };
        let out = forward_lbs(&self.inner, &pose, &shape).map_err(to_py)?;
        let pts = |v: &[nalgebra::Vector3<f64>]| v.iter().map(|p| [p.x, p.y, p.z]).collect();
        Ok((pts(&out.vertices), pts(&out.joints)))
    }
}

/// Avatar parameters: pose, shape and per-Gaussian attributes.
#[pyclass(module = "gst_py", frozen, skip_from_py_object)]
#[derive(Clone)]
struct Params {
    avatar: Avatar,
    scaffold: ScaffoldConfig,
}

#[pymethods]
impl Params {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (avatar, scaffold) = gst_core::dataio::read_params(&path).map_err(to_py)?;
        Ok(Self { avatar, scaffold })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        gst_core::dataio::write_params(&path, &self.avatar, &self.scaffold).map_err(to_py)
    }

    #[getter]
    fn betas(&self) -> Vec<f64> {
        self.avatar.betas.clone()
    }

    #[getter]
    fn joint_rotations(&self) -> Vec<[f64; 9]> {
        self.avatar.pose.joint_rotations.iter().map(matrix_rows).collect()
    }

    #[getter]
    fn num_gaussians(&self) -> usize {
        self.avatar.attrs.len()
    }
}

#[pyclass(module = "gst_py", frozen)]
struct Scene {
    inner: gst_core::dataio::SceneDataset,
}

#[pymethods]
impl Scene {
    /// Random pose and appearance rendered from a ring of cameras.
    #[staticmethod]
    #[pyo3(signature = (model, pose_seed = 0, appearance_seed = 1, views = 8, size = 64))]
    fn generate(model: &BodyModel, pose_seed: u64, appearance_seed: u64, views: usize, size: usize) -> PyResult<Self> {
        let opts = GenerateOptions {
            rig: RigConfig {
                views,
                width: size,
                height: size,
                ..Default::default()
            },
            ..Default::default()
        };
        let inner = gst_core::dataio::generate_scene(&model.inner, pose_seed, appearance_seed, &opts, "body_model.gstb")
            .map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Reads a scene directory and the body model it references.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<(Self, BodyModel)> {
        let inner = gst_core::dataio::load_scene(&dir).map_err(to_py)?;
        let model = inner.load_body_model(&dir).map_err(to_py)?;
        Ok((Self { inner }, BodyModel { inner: model }))
    }

    /// Writes the scene files; the body model is not copied.
    fn save(&self, dir: PathBuf) -> PyResult<()> {
        gst_core::dataio::save_scene(&self.inner, &dir).map_err(to_py)
    }

    #[getter]
    fn num_views(&self) -> usize {
        self.inner.num_views()
    }

    #[getter]
    fn resolution(&self) -> (usize, usize) {
        self.inner.resolution()
    }

    /// Row-major RGB values of view `i` in `[0, 1]`.
    fn image(&self, i: usize) -> PyResult<Vec<f64>> {
        self.view(i).map(|v| v.image.data.clone())
    }

    fn mask(&self, i: usize) -> PyResult<Vec<f64>> {
        self.view(i).map(|v| v.mask.data.clone())
    }

    fn ground_truth(&self) -> Option<Params> {
        self.inner.gt.as_ref().map(|g| Params {
            avatar: g.avatar.clone(),
            scaffold: g.scaffold,
        })
    }
}

impl Scene {
    fn view(&self, i: usize) -> PyResult<&gst_core::dataio::SceneView> {
        self.inner
            .views
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("view {i} out of range")))
    }
}

/// Fits a scene. Returns the best parameters and a summary with the loss
/// trace and final metrics.
#[pyfunction]
#[pyo3(signature = (scene, model, init = "perturbed:10", steps = 2000, seed = 0, lambda_tight = None))]
fn fit(
    py: Python<'_>,
    scene: &Scene,
    model: &BodyModel,
    init: &str,
    steps: usize,
    seed: u64,
    lambda_tight: Option<f64>,
) -> PyResult<(Params, Py<PyAny>)> {
    let init: FitInit = init.parse().map_err(to_py)?;
    let mut opts = FitOptions {
        steps,
        seed,
        ..Default::default()
    };
    if let Some(l) = lambda_tight {
        opts.weights.lambda_tight = l;
    }
    let cfg = match (&init, &scene.inner.gt) {
        (FitInit::GroundTruth, Some(gt)) => gt.scaffold,
        _ => ScaffoldConfig::default(),
    };
    let start = gst_core::fitting::initial_avatar(&scene.inner, &model.inner, &cfg, init, seed).map_err(to_py)?;
    let res = gst_core::fitting::fit_scene(&scene.inner, &model.inner, &cfg, &start, &opts).map_err(to_py)?;
    let eval = gst_core::metrics::evaluate_avatar(&model.inner, &res.avatar, &cfg, &scene.inner).map_err(to_py)?;
    let summary = serde_json::json!({
        "best_step": res.best_step,
        "best_total": res.best_total,
        "trace": res.trace,
        "metrics": eval.summary,
    });
    Ok((
        Params {
            avatar: res.avatar,
            scaffold: cfg,
        },
        to_object(py, &summary)?,
    ))
}

/// Renders view `view` of the scene: `(rgb, alpha)` as flat row-major lists.
#[pyfunction]
fn render(model: &BodyModel, params: &Params, scene: &Scene, view: usize) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let cam = scene.view(view)?.camera.clone();
    let fwd = gst_core::pipeline::forward(&model.inner, &params.avatar, &params.scaffold, &[cam], &scene.inner.background)
        .map_err(to_py)?;
    let r = &fwd.renders[0];
    Ok((r.rgb.data.clone(), r.alpha.data.clone()))
}

/// Per-view and mean metrics of `params` against the scene.
#[pyfunction]
fn evaluate(py: Python<'_>, scene: &Scene, model: &BodyModel, params: &Params) -> PyResult<Py<PyAny>> {
    let eval = gst_core::metrics::evaluate_avatar(&model.inner, &params.avatar, &params.scaffold, &scene.inner)
        .map_err(to_py)?;
    to_object(py, &eval)
}

/// Finite-difference reports for one module (or `"all"`).
#[pyfunction]
#[pyo3(signature = (module = "all", seed = 0, seeds = 1))]
fn gradcheck(py: Python<'_>, module: &str, seed: u64, seeds: usize) -> PyResult<Py<PyAny>> {
    let modules: Vec<&str> = if module == "all" {
        gst_core::gradcheck::MODULES.to_vec()
    } else {
        vec![module]
    };
    let mut reports = Vec::new();
    for m in modules {
        reports.extend(gst_core::gradcheck::run_suite(m, seed, seeds).map_err(to_py)?);
    }
    to_object(py, &reports)
}

#[pyfunction(name = "bench")]
#[pyo3(signature = (resolution = 256, frames = 10, threads = vec![1]))]
fn run_bench(py: Python<'_>, resolution: usize, frames: usize, threads: Vec<usize>) -> PyResult<Py<PyAny>> {
    let report = gst_core::bench::run_bench(&gst_core::bench::BenchOptions {
        resolution,
        frames,
        threads,
        ..Default::default()
    })
    .map_err(to_py)?;
    to_object(py, &report)
}

/// `(queries, attribute_rows)` decoded by a predictor with `groups` token
/// groups of `group_size` vertices each.
#[pyfunction]
fn token_counts(groups: usize, group_size: usize) -> PyResult<(usize, usize)> {
    let cfg = gst_core::predictor::PredictorConfig {
        groups,
        group_size,
        embed_dim: 16,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        mlp_ratio: 1,
        ..Default::default()
    };
    let p = gst_core::predictor::Predictor::new(cfg.clone()).map_err(to_py)?;
    let input = gst_core::image::Image::filled(cfg.image_size, cfg.image_size, 3, 0.5);
    let (out, cache) = p.forward(&input).map_err(to_py)?;
    Ok((cache.decoded_queries(), out.attrs.len()))
}

#[pymodule]
fn gst_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<BodyModel>()?;
    m.add_class::<Params>()?;
    m.add_class::<Scene>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(render, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    m.add_function(wrap_pyfunction!(token_counts, m)?)?;
    Ok(())
}
