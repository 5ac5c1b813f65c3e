//! Python bindings for pillargen.
//!
//! Points cross the boundary as tuples: radar points as
//! `(x, y, z, rcs, vx, vy)`, generated points as `(x, y, rcs, vx, vy, score)`
//! and metric inputs as `(x, y, rcs, vx, vy)`.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use pillargen::metrics::{self, AttributedPoint2D};
use pillargen::nn::checkpoint;
use pillargen::opp;
use pillargen::parallel::thread_count;
use pillargen::{io, synth, train as trainer};
use pillargen::{Error, GeneratedPoint, Phase, RadarPoint, ScenePair};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

type Radar = (f64, f64, f64, f64, f64, f64);
type Attributed = (f64, f64, f64, f64, f64);

fn radar_in(pts: Vec<Radar>) -> Vec<RadarPoint> {
    pts.into_iter().map(|(x, y, z, r, vx, vy)| RadarPoint::new(x, y, z, r, vx, vy)).collect()
}

fn radar_out(pts: &[RadarPoint]) -> Vec<Radar> {
    pts.iter().map(|p| (p.x, p.y, p.z, p.rcs, p.vx, p.vy)).collect()
}

fn generated_out(pts: &[GeneratedPoint]) -> Vec<Radar> {
    pts.iter().map(|p| (p.x, p.y, p.rcs, p.vx, p.vy, p.score)).collect()
}

fn attributed_in(pts: Vec<Attributed>) -> Vec<AttributedPoint2D> {
    pts.into_iter().map(|(x, y, r, vx, vy)| AttributedPoint2D::new(x, y, r, vx, vy)).collect()
}

/// Full configuration with `grid`, `model`, `train` and `synth` sections.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: pillargen::Config,
}

#[pymethods]
impl PyConfig {
    /// Defaults, or the JSON text `json` when given.
    #[new]
    #[pyo3(signature = (json=None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => pillargen::Config::from_json(text).map_err(to_py)?,
            None => pillargen::Config::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: pillargen::Config::load(path).map_err(to_py)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    /// Grid size as `(height, width)` in pillars.
    fn grid_dims(&self) -> PyResult<(usize, usize)> {
        self.inner.grid.dims().map_err(to_py)
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.train.epochs
    }

    #[setter]
    fn set_epochs(&mut self, v: usize) {
        self.inner.train.epochs = v;
    }

    #[getter]
    fn score_threshold(&self) -> f64 {
        self.inner.model.score_threshold
    }

    #[setter]
    fn set_score_threshold(&mut self, v: f64) {
        self.inner.model.score_threshold = v;
    }
}

/// A paired source and target scene.
#[pyclass(name = "Scene", from_py_object)]
#[derive(Clone)]
struct PyScene {
    inner: ScenePair,
}

#[pymethods]
impl PyScene {
    #[new]
    fn new(scene_id: String, source: Vec<Radar>, target: Vec<Radar>) -> Self {
        Self {
            inner: ScenePair::new(scene_id, radar_in(source), radar_in(target)),
        }
    }

    #[getter]
    fn scene_id(&self) -> String {
        self.inner.scene_id.clone()
    }

    #[getter]
    fn source(&self) -> Vec<Radar> {
        radar_out(&self.inner.source.points)
    }

    #[getter]
    fn target(&self) -> Vec<Radar> {
        radar_out(&self.inner.target.points)
    }

    fn __repr__(&self) -> String {
        format!(
            "Scene('{}', {} source points, {} target points)",
            self.inner.scene_id,
            self.inner.source.len(),
            self.inner.target.len()
        )
    }
}

fn scenes_in(scenes: Vec<PyScene>) -> Vec<ScenePair> {
    scenes.into_iter().map(|s| s.inner).collect()
}

/// A PillarGen model.
#[pyclass(name = "Model")]
struct PyModel {
    inner: pillargen::PillarGen,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized model with generation heads.
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<PyConfig>, seed: u64) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner).unwrap_or_default();
        cfg.validate().map_err(to_py)?;
        Ok(Self {
            inner: pillargen::PillarGen::new(cfg.grid, cfg.model, seed, true).map_err(to_py)?,
        })
    }

    /// Loads a PGN1 checkpoint written for the model shape in `config`.
    #[staticmethod]
    #[pyo3(signature = (path, config=None))]
    fn load(path: &str, config: Option<PyConfig>) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner).unwrap_or_default();
        Ok(Self {
            inner: trainer::load_checkpoint(path, &cfg).map_err(to_py)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.inner.to_bytes()
    }

    fn num_parameters(&self) -> usize {
        self.inner.store.iter().map(|p| p.value.len()).sum()
    }

    /// Generated points kept above `threshold` (the configured score
    /// threshold by default).
    #[pyo3(signature = (source, scene_id, threshold=None))]
    fn infer(&self, source: Vec<Radar>, scene_id: &str, threshold: Option<f64>) -> PyResult<Vec<Radar>> {
        let t = threshold.unwrap_or(self.inner.config.score_threshold);
        let cloud = pillargen::PointCloud::new(radar_in(source));
        let g = self.inner.infer_with_threshold(&cloud, scene_id, t).map_err(to_py)?;
        Ok(generated_out(&g.points))
    }

    /// Occupancy probability of every pillar, row-major.
    fn occupancy(&self, source: Vec<Radar>) -> PyResult<Vec<f64>> {
        let cloud = pillargen::PointCloud::new(radar_in(source));
        Ok(self.inner.opp_output(&cloud).map_err(to_py)?.p_occ)
    }

    /// Metric report over `scenes` as a dict-compatible JSON string.
    fn evaluate(&self, scenes: Vec<PyScene>) -> PyResult<String> {
        let out = trainer::run_eval(&self.inner, &scenes_in(scenes), thread_count()).map_err(to_py)?;
        Ok(out.report.to_json())
    }
}

/// Trains one phase (`"opp"` or `"e2e"`) and returns the model with its
/// per-epoch mean total loss.
#[pyfunction]
#[pyo3(signature = (config, phase, scenes, init=None))]
fn train(config: PyConfig, phase: &str, scenes: Vec<PyScene>, init: Option<&PyModel>) -> PyResult<(PyModel, Vec<f64>)> {
    let phase: Phase = phase.parse().map_err(to_py)?;
    let init = init.map(|m| checkpoint::decode(&m.inner.to_bytes())).transpose().map_err(to_py)?;
    let out = trainer::train(&config.inner, phase, &scenes_in(scenes), init.as_ref()).map_err(to_py)?;
    let losses = out.epochs.iter().map(|c| c.total).collect();
    Ok((PyModel { inner: out.model }, losses))
}

/// Deterministic synthetic scenes `0..n` from the `synth` and `grid` sections.
#[pyfunction]
#[pyo3(signature = (n, config=None))]
fn gen_scenes(n: usize, config: Option<PyConfig>) -> PyResult<Vec<PyScene>> {
    let cfg = config.map(|c| c.inner).unwrap_or_default();
    cfg.synth.validate().map_err(to_py)?;
    Ok(synth::gen_scenes(&cfg.synth, &cfg.grid, n, thread_count())
        .into_iter()
        .map(|inner| PyScene { inner })
        .collect())
}

#[pyfunction]
fn read_scenes(path: &str) -> PyResult<Vec<PyScene>> {
    Ok(io::read_scene_file(path).map_err(to_py)?.into_iter().map(|inner| PyScene { inner }).collect())
}

#[pyfunction]
fn write_scenes(scenes: Vec<PyScene>, path: &str) -> PyResult<()> {
    io::write_scene_file(&scenes_in(scenes), path).map_err(to_py)
}

/// `(bin, residual)` of a positive point count.
#[pyfunction]
fn encode_count(k: u64) -> PyResult<(u32, f64)> {
    let t = opp::encode_count(k).map_err(to_py)?;
    Ok((t.bin, t.res))
}

#[pyfunction]
fn decode_count(bin: u32, res: f64) -> u64 {
    opp::decode_count(bin, res)
}

macro_rules! metric {
    ($name:ident) => {
        #[pyfunction]
        fn $name(p: Vec<Attributed>, q: Vec<Attributed>) -> PyResult<f64> {
            metrics::$name(&attributed_in(p), &attributed_in(q)).map_err(to_py)
        }
    };
}

metric!(rcd_2d);
metric!(rhd_2d);
metric!(rcd_5d);
metric!(rhd_5d);

#[pymodule]
#[pyo3(name = "pillargen")]
fn pillargen_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gen_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(read_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(write_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(encode_count, m)?)?;
    m.add_function(wrap_pyfunction!(decode_count, m)?)?;
    m.add_function(wrap_pyfunction!(rcd_2d, m)?)?;
    m.add_function(wrap_pyfunction!(rhd_2d, m)?)?;
    m.add_function(wrap_pyfunction!(rcd_5d, m)?)?;
    m.add_function(wrap_pyfunction!(rhd_5d, m)?)?;
    Ok(())
}
