//! Python bindings: datasets, training, checkpoints, rendering and the
//! per-ray compositor.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use engine::checkpoint::Checkpoint as EngineCheckpoint;
use engine::config;
use engine::error::Error;
use engine::field::FieldOutputs;
use engine::geometry::{SampleSet, Vec3};
use engine::render::{render, RendererKind, SurfaceParams};
use engine::scene::{generate_dataset as engine_generate, preset, Dataset as EngineDataset, SceneSpec, Split};
use engine::trainer::{evaluate, render_view, train as engine_train, TrainConfig};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::MissingInput { .. } | Error::MissingFrames(_) => PyFileNotFoundError::new_err(e.to_string()),
        Error::UnknownKey(_) => PyKeyError::new_err(e.to_string()),
        Error::Numerical { .. } | Error::Corrupt { .. } | Error::Io { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn renderer(name: &str) -> PyResult<RendererKind> {
    name.parse().map_err(py_err)
}

fn scene_from(arg: &str) -> PyResult<SceneSpec> {
    match preset(arg) {
        Some(s) => Ok(s),
        None => SceneSpec::from_json(arg).map_err(py_err),
    }
}

/// A posed image dataset with its scene description.
#[pyclass(frozen)]
struct Dataset {
    inner: EngineDataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Dataset {
            inner: EngineDataset::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.frames.len()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    /// Frame indices of one split: "train", "val" or "test".
    fn split(&self, name: &str) -> PyResult<Vec<usize>> {
        let split = match name {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => return Err(PyValueError::new_err(format!("unknown split `{other}`"))),
        };
        Ok(self.inner.split(split).map(|f| f.index).collect())
    }

    /// Ground-truth image of a frame as (height, width, rows of RGB triples).
    fn image(&self, frame: usize) -> PyResult<(usize, usize, Vec<Vec<[f64; 3]>>)> {
        let f = self
            .inner
            .frames
            .iter()
            .find(|f| f.index == frame)
            .ok_or_else(|| py_err(Error::MissingFrames(vec![frame])))?;
        let img = &f.image;
        let rows = img.pixels.chunks(img.width).map(|r| r.to_vec()).collect();
        Ok((img.height, img.width, rows))
    }

    fn scene_json(&self) -> String {
        self.inner.scene.to_json()
    }
}

/// Trained field plus the render settings it was trained with.
#[pyclass(frozen)]
struct Checkpoint {
    inner: EngineCheckpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Checkpoint {
            inner: EngineCheckpoint::load(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn iteration(&self) -> usize {
        self.inner.iteration
    }

    #[getter]
    fn val_psnr(&self) -> Option<f64> {
        self.inner.val_psnr
    }

    #[getter]
    fn renderer(&self) -> String {
        self.inner.settings.renderer.to_string()
    }

    /// Renders dataset frame `frame`; returns (height, width, rows, depth rows).
    #[pyo3(signature = (dataset, frame, renderer=None))]
    fn render_frame(
        &self,
        dataset: &Dataset,
        frame: usize,
        renderer: Option<&str>,
    ) -> PyResult<(usize, usize, Vec<Vec<[f64; 3]>>, Vec<Vec<f64>>)> {
        let f = dataset
            .inner
            .frames
            .iter()
            .find(|f| f.index == frame)
            .ok_or_else(|| py_err(Error::MissingFrames(vec![frame])))?;
        let mut settings = self.inner.settings;
        if let Some(r) = renderer {
            settings.renderer = self::renderer(r)?;
        }
        let (img, depth) = render_view(&self.inner.field, &settings, &f.camera).map_err(py_err)?;
        let rows = img.pixels.chunks(img.width).map(|r| r.to_vec()).collect();
        let depth = depth.chunks(img.width).map(|r| r.to_vec()).collect();
        Ok((img.height, img.width, rows, depth))
    }

    /// Mean metrics over the test split: psnr_full, psnr_static, ssim_full, ssim_static.
    #[pyo3(signature = (dataset, renderer=None))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &Dataset, renderer: Option<&str>) -> PyResult<Bound<'py, PyDict>> {
        let kind = renderer.map(self::renderer).transpose()?;
        let report = evaluate(&self.inner, &dataset.inner, kind).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("psnr_full", report.mean(|m| m.psnr_full))?;
        d.set_item("psnr_static", report.mean(|m| m.psnr_static))?;
        d.set_item("ssim_full", report.mean(|m| m.ssim_full))?;
        d.set_item("ssim_static", report.mean(|m| m.ssim_static))?;
        d.set_item("frames", report.frames.len())?;
        Ok(d)
    }
}

/// Renders a scene (preset name or JSON text) into a dataset.
#[pyfunction]
#[pyo3(signature = (scene, seed=0))]
fn generate_dataset(scene: &str, seed: u64) -> PyResult<Dataset> {
    let spec = scene_from(scene)?;
    Ok(Dataset {
        inner: engine_generate(&spec, seed).map_err(py_err)?,
    })
}

/// Trains a field. `config` maps dotted keys to values, as in config files.
#[pyfunction]
#[pyo3(signature = (dataset, config=None))]
fn train(py: Python<'_>, dataset: &Dataset, config: Option<&Bound<'_, PyDict>>) -> PyResult<(Checkpoint, Vec<(usize, f64, Option<f64>)>)> {
    let mut cfg = TrainConfig::default();
    if let Some(map) = config {
        for (k, v) in map.iter() {
            let key: String = k.extract()?;
            let value = py_to_json(&v)?;
            config::apply(&mut cfg, &key, &value).map_err(py_err)?;
        }
    }
    cfg.validate().map_err(py_err)?;
    let data = &dataset.inner;
    let (ck, log) = py.detach(|| engine_train(&cfg, data)).map_err(py_err)?;
    let records = log.records.iter().map(|r| (r.iteration, r.loss, r.val_psnr)).collect();
    Ok((Checkpoint { inner: ck }, records))
}

fn py_to_json(v: &Bound<'_, PyAny>) -> PyResult<serde_json::Value> {
    if let Ok(b) = v.extract::<bool>() {
        return Ok(b.into());
    }
    if let Ok(i) = v.extract::<u64>() {
        return Ok(i.into());
    }
    if let Ok(f) = v.extract::<f64>() {
        return Ok(f.into());
    }
    if let Ok(s) = v.extract::<String>() {
        return Ok(s.into());
    }
    if let Ok(items) = v.extract::<Vec<u64>>() {
        return Ok(items.into());
    }
    Err(PyValueError::new_err(format!("unsupported config value {v}")))
}

/// Composites one ray. Returns a dict with rgb, depth, accumulation,
/// fallback and the per-sample weights actually used.
#[pyfunction]
#[pyo3(signature = (t, sigma, rgb, t_near, t_far, renderer="single_surface", eta=0.5, base=0.2))]
#[allow(clippy::too_many_arguments)]
fn render_ray<'py>(
    py: Python<'py>,
    t: Vec<f64>,
    sigma: Vec<f64>,
    rgb: Vec<[f64; 3]>,
    t_near: f64,
    t_far: f64,
    renderer: &str,
    eta: f64,
    base: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let kind = self::renderer(renderer)?;
    let n = t.len();
    let samples = SampleSet::from_depths(vec![Vec3::zeros()], vec![Vec3::z()], vec![t_near], vec![t_far], n, t)
        .map_err(py_err)?;
    let field = FieldOutputs { sigma, rgb };
    let params = SurfaceParams {
        eta,
        base,
        normalize_weights: false,
    };
    let (out, profile) = render(kind, &samples, &field, &params).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("rgb", out.rgb[0])?;
    d.set_item("depth", out.depth[0])?;
    d.set_item("accumulation", out.accumulation[0])?;
    d.set_item("fallback", out.fallback[0])?;
    d.set_item("weights", profile.w_hat)?;
    d.set_item("raw_weights", profile.w)?;
    Ok(d)
}

#[pymodule]
fn sealight(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(render_ray, m)?)?;
    m.add("PRESETS", engine::scene::PRESETS.to_vec())?;
    Ok(())
}
