//! Python bindings: configuration, simulation, training steps, rendering
//! and the gradient suite.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use trend_core::cli::{cmd_gradcheck, cmd_simulate};
use trend_core::config::{key_names, RunConfig};
use trend_core::diffcore::alpha_value;
use trend_core::lidarsim::{transform_to_frame, Sequence};
use trend_core::renderer::{render_depth_values, select_render_rays};
use trend_core::trainer::{
    sequence_for_step, simulate_dataset, train_step, AdamState, Checkpoint, Model, ModelPredictor, StepReport,
};
use trend_core::Error;

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config(_) | Error::Contract(_) => PyValueError::new_err(msg),
        Error::Numeric { .. } | Error::OutOfField(_) => PyArithmeticError::new_err(msg),
        Error::Io { .. } | Error::Format { .. } => PyIOError::new_err(msg),
    }
}

/// A run configuration: defaults, optionally loaded from a file, then overrides.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (path=None, overrides=None))]
    fn new(path: Option<PathBuf>, overrides: Option<Vec<String>>) -> PyResult<Self> {
        let mut inner = match path {
            Some(p) => RunConfig::load(&p).map_err(py_err)?,
            None => RunConfig::default(),
        };
        for o in overrides.unwrap_or_default() {
            inner.apply_override(&o).map_err(py_err)?;
        }
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::parse(text).map_err(py_err)? })
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        key_names()
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(py_err)
    }

    fn hash(&self) -> String {
        hex::encode(self.inner.hash())
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("Config(hash={})", &self.hash()[..12])
    }
}

/// Simulates the configured dataset into `out`; returns the sequence count.
#[pyfunction]
fn simulate(config: &PyConfig, out: PathBuf) -> PyResult<usize> {
    cmd_simulate(&config.inner, &out).map_err(py_err)
}

/// NeuS opacity between two consecutive SDF samples.
#[pyfunction]
fn alpha(s_near: f64, s_far: f64, z: f64) -> f64 {
    alpha_value(s_near, s_far, z)
}

/// Rendered depth and per-interval weights for one ray.
#[pyfunction]
fn render_depth(sdf: Vec<f64>, distances: Vec<f64>, z: f64) -> PyResult<(f64, Vec<f64>)> {
    render_depth_values(&sdf, &distances, z).map_err(py_err)
}

/// Runs the finite-difference suite; one dict per check.
#[pyfunction]
#[pyo3(signature = (seeds=10, step=1e-3, fault=None))]
fn gradcheck<'py>(py: Python<'py>, seeds: u64, step: f64, fault: Option<&str>) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let results = py.detach(|| cmd_gradcheck(seeds, step, fault)).map_err(py_err)?;
    results
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("module", r.module)?;
            d.set_item("case", r.case)?;
            d.set_item("seed", r.seed)?;
            d.set_item("passed", r.passed())?;
            d.set_item("max_rel_error", r.report.max_rel_error)?;
            d.set_item("kink_crossings", r.report.kink_crossings)?;
            Ok(d)
        })
        .collect()
}

fn report_dict<'py>(py: Python<'py>, r: &StepReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", r.step)?;
    d.set_item("epoch", r.epoch)?;
    d.set_item("l", r.l)?;
    d.set_item("m", r.m)?;
    d.set_item("loss_t0", r.loss_t0)?;
    d.set_item("loss_tm", r.loss_tm)?;
    d.set_item("lr", r.lr)?;
    Ok(d)
}

/// In-memory pre-training on a freshly simulated dataset.
#[pyclass(name = "Trainer", unsendable)]
struct PyTrainer {
    cfg: RunConfig,
    sequences: Vec<Sequence>,
    model: Model,
    adam: AdamState,
    step: u64,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(py: Python<'_>, config: &PyConfig) -> PyResult<Self> {
        let cfg = config.inner.clone();
        cfg.validate().map_err(py_err)?;
        let episodes = py.detach(|| simulate_dataset(&cfg.sim)).map_err(py_err)?;
        let model = Model::new(cfg.train.model.clone(), cfg.seed).map_err(py_err)?;
        let adam = AdamState::new(&model.store);
        Ok(Self { sequences: episodes.into_iter().map(|e| e.sequence).collect(), cfg, model, adam, step: 0 })
    }

    #[getter]
    fn step(&self) -> u64 {
        self.step
    }

    #[getter]
    fn num_sequences(&self) -> usize {
        self.sequences.len()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.model.store.names()
    }

    /// One optimizer step; returns the step report.
    fn train_step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let i = sequence_for_step(self.cfg.seed, self.step, self.sequences.len());
        let r = train_step(&mut self.model, &mut self.adam, &self.sequences[i], &self.cfg.train, self.step).map_err(py_err)?;
        self.step += 1;
        report_dict(py, &r)
    }

    /// Observed ranges, rendered ranges and weight sums for frame `frame`
    /// of sequence `sequence`, rendered from frame 0.
    #[pyo3(signature = (sequence=0, frame=0, max_rays=256))]
    fn render(&self, sequence: usize, frame: usize, max_rays: usize) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let seq = self.sequences.get(sequence).ok_or_else(|| PyIndexError::new_err("sequence out of range"))?;
        let cloud = seq.clouds.get(frame).ok_or_else(|| PyIndexError::new_err("frame out of range"))?;
        let cloud = transform_to_frame(cloud, seq.clouds[0].frame_pose);
        let rays = select_render_rays(&cloud, self.cfg.train.ground_threshold(), max_rays, self.cfg.seed)
            .map_err(py_err)?
            .ok_or_else(|| PyValueError::new_err("no rays survive the ground filter"))?;
        let (pred, wsum) = ModelPredictor::new(&self.model, &self.cfg.train).render(seq, frame, &rays).map_err(py_err)?;
        Ok((rays.ranges.clone(), pred, wsum))
    }

    fn save_checkpoint(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint { step: self.step, config_hash: self.cfg.hash(), params: self.model.store.clone(), adam: self.adam.clone() }
            .save(&path)
            .map_err(py_err)
    }

    fn load_checkpoint(&mut self, path: PathBuf) -> PyResult<()> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        if ck.config_hash != self.cfg.hash() {
            return Err(PyValueError::new_err("checkpoint was written under a different configuration"));
        }
        ck.restore_into(&mut self.model.store).map_err(py_err)?;
        self.adam = ck.adam;
        self.step = ck.step;
        Ok(())
    }
}

#[pymodule]
fn trend(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(alpha, m)?)?;
    m.add_function(wrap_pyfunction!(render_depth, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
