//! Python bindings for the `m2unet` crate.
//!
//! Tensors cross the boundary as flat lists plus a shape; images and
//! checkpoints are exchanged through files.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use m2unet::data::{read_pnm, synth_polyp_raw, write_pnm, write_raw_dataset};
use m2unet::engine::Tensor as CoreTensor;
use m2unet::gradcheck;
use m2unet::kv::KvConfig;
use m2unet::metrics::{self, JACCARD_ALPHA};
use m2unet::model::{Ablation, M2UNet, ModelConfig as CoreConfig};
use m2unet::trainer::{self, Checkpoint, TrainConfig, Trainer as CoreTrainer};
use m2unet::Error;

/// Maps crate errors onto Python exception types.
pub fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        Error::Internal(_) | Error::NonFinite { .. } => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for m2unet::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py_err)
    }
}

/// A dense f32 tensor.
#[pyclass(name = "Tensor", module = "m2unet_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    pub inner: CoreTensor<f32>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        Ok(PyTensor { inner: CoreTensor::new(shape, data).py()? })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> PyResult<Self> {
        Ok(PyTensor { inner: CoreTensor::zeros(shape).py()? })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        Ok(PyTensor { inner: self.inner.clone().reshape(shape).py()? })
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// Network hyperparameters.
#[pyclass(name = "ModelConfig", module = "m2unet_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyModelConfig {
    pub inner: CoreConfig,
}

#[pymethods]
impl PyModelConfig {
    /// Builds a config from `model.*` lines over the default preset.
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(PyModelConfig { inner: CoreConfig::from_kv(&KvConfig::parse(text).py()?).py()? })
    }

    /// `"default"`, `"tiny"` or `"gradcheck"`.
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Self::new(&format!("model.preset = {name}"))
    }

    fn with_image_size(&self, width: usize, height: usize) -> PyResult<Self> {
        let inner = CoreConfig { image_size: (width, height), ..self.inner.clone() };
        inner.validate().py()?;
        Ok(PyModelConfig { inner })
    }

    /// Switches the decoder cross-links to one of the ablation variants,
    /// named as in `ablations()`.
    fn with_ablation(&self, label: &str) -> PyResult<Self> {
        let ab = Ablation::ALL
            .into_iter()
            .find(|a| a.label() == label)
            .ok_or_else(|| PyValueError::new_err(format!("unknown ablation `{label}`")))?;
        Ok(PyModelConfig { inner: self.inner.clone().with_ablation(ab) })
    }

    #[staticmethod]
    fn ablations() -> Vec<&'static str> {
        Ablation::ALL.iter().map(|a| a.label()).collect()
    }

    #[getter]
    fn image_size(&self) -> (usize, usize) {
        self.inner.image_size
    }

    #[getter]
    fn filters(&self) -> [usize; 4] {
        self.inner.filters
    }

    fn to_text(&self) -> String {
        self.inner.to_kv().to_text()
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig(image_size={:?}, filters={:?})", self.inner.image_size, self.inner.filters)
    }
}

/// Network parameters together with their config.
#[pyclass(name = "Model", module = "m2unet_py")]
pub struct PyModel {
    pub inner: M2UNet<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &PyModelConfig, seed: u64) -> PyResult<Self> {
        Ok(PyModel { inner: M2UNet::new(&config.inner, seed).py()? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).py()?;
        Ok(PyModel { inner: M2UNet { config: ck.config, params: ck.params } })
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig { inner: self.inner.config.clone() }
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Probabilities `[N,H,W,1]` for images `[N,H,W,3]` in `[-1, 1]`.
    fn predict(&self, py: Python<'_>, images: &PyTensor) -> PyResult<PyTensor> {
        let inner = py.detach(|| self.inner.predict(&images.inner)).py()?;
        Ok(PyTensor { inner })
    }

    /// Shapes of the four encoder levels, the decoder output and the head.
    fn forward_shapes(&self, py: Python<'_>, images: &PyTensor) -> PyResult<Vec<Vec<usize>>> {
        let out = py.detach(|| self.inner.forward_all(&images.inner)).py()?;
        let mut shapes: Vec<Vec<usize>> = out.features.iter().map(|f| f.shape().to_vec()).collect();
        shapes.push(out.decoder.shape().to_vec());
        shapes.push(out.probabilities.shape().to_vec());
        Ok(shapes)
    }

    /// Segments a PPM file and writes an 8-bit PGM at the input's size.
    fn predict_file(&self, py: Python<'_>, image: PathBuf, out: PathBuf) -> PyResult<()> {
        py.detach(|| {
            let raw = read_pnm(&image)?;
            write_pnm(&out, &trainer::predict_image(&self.inner, &raw)?)
        })
        .py()
    }

    fn __repr__(&self) -> String {
        format!("Model(image_size={:?}, params={})", self.inner.config.image_size, self.inner.param_count())
    }
}

/// A training run driven one step or epoch at a time.
#[pyclass(name = "Trainer", module = "m2unet_py")]
pub struct PyTrainer {
    inner: CoreTrainer,
}

#[pymethods]
impl PyTrainer {
    /// Builds a run from `train.*`, `model.*` and `aug.*` lines.
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(py: Python<'_>, text: &str) -> PyResult<Self> {
        let cfg = TrainConfig::parse(text).py()?;
        let inner = py
            .detach(|| {
                let data = trainer::load_training_data(&cfg)?;
                CoreTrainer::new(cfg, data)
            })
            .py()?;
        Ok(PyTrainer { inner })
    }

    /// Continues from a checkpoint with the same model config.
    #[staticmethod]
    fn resume(py: Python<'_>, text: &str, checkpoint: PathBuf) -> PyResult<Self> {
        let cfg = TrainConfig::parse(text).py()?;
        let inner = py
            .detach(|| {
                let data = trainer::load_training_data(&cfg)?;
                CoreTrainer::resume(cfg, data, Checkpoint::load(&checkpoint)?)
            })
            .py()?;
        Ok(PyTrainer { inner })
    }

    #[getter]
    fn step_count(&self) -> u64 {
        self.inner.step
    }

    #[getter]
    fn total_steps(&self) -> u64 {
        self.inner.total_steps()
    }

    /// Runs one optimizer step; returns `(step, epoch, loss, lr)`.
    fn step(&mut self, py: Python<'_>) -> PyResult<(u64, usize, f64, f64)> {
        let r = py.detach(|| self.inner.train_step()).py()?;
        Ok((r.step, r.epoch, r.loss, r.lr))
    }

    /// Runs to the end of the current epoch; returns `(epoch, mean loss, lr)`.
    fn epoch(&mut self, py: Python<'_>) -> PyResult<(usize, f64, f64)> {
        let l = py.detach(|| self.inner.train_epoch()).py()?;
        Ok((l.epoch, l.mean_loss, l.lr))
    }

    /// Mean Dice, IoU and MAE on the training samples.
    fn evaluate(&self, py: Python<'_>) -> PyResult<(f64, f64, f64)> {
        let r = py
            .detach(|| {
                let data = trainer::load_training_data(&self.inner.config)?;
                self.inner.evaluate(&data)
            })
            .py()?;
        Ok((r.m_dice, r.m_iou, r.mae))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.checkpoint().save(&path).py()
    }

    fn model(&self) -> PyModel {
        PyModel { inner: self.inner.model.clone() }
    }
}

/// Smoothed Jaccard loss of a binary target and a prediction in `[0, 1]`.
#[pyfunction]
#[pyo3(signature = (y, yhat, alpha = JACCARD_ALPHA))]
fn jaccard_loss(y: &PyTensor, yhat: &PyTensor, alpha: f64) -> PyResult<f64> {
    metrics::jaccard_loss_value(&y.inner.cast::<f64>(), &yhat.inner.cast::<f64>(), alpha).py()
}

#[pyfunction]
fn dice(y: &PyTensor, pred: &PyTensor) -> PyResult<f64> {
    metrics::dice(&y.inner, &pred.inner).py()
}

#[pyfunction]
fn iou(y: &PyTensor, pred: &PyTensor) -> PyResult<f64> {
    metrics::iou(&y.inner, &pred.inner).py()
}

#[pyfunction]
fn mae(y: &PyTensor, probs: &PyTensor) -> PyResult<f64> {
    metrics::mae(&y.inner, &probs.inner).py()
}

/// Runs one named gradient check; returns `(max relative error, tolerance, passed)`.
#[pyfunction]
#[pyo3(signature = (name, seed = 0))]
fn gradcheck_run(py: Python<'_>, name: &str, seed: u64) -> PyResult<(f64, f64, bool)> {
    let r = py.detach(|| gradcheck::run(name, seed)).py()?;
    Ok((r.max_rel_err, r.tolerance, r.passed()))
}

#[pyfunction]
fn gradcheck_names() -> Vec<&'static str> {
    gradcheck::CHECKS.to_vec()
}

/// Writes `n` synthetic image/mask pairs under `out`.
#[pyfunction]
#[pyo3(signature = (out, n = 16, size = 64, seed = 0))]
fn synth_dataset(out: PathBuf, n: usize, size: usize, seed: u64) -> PyResult<()> {
    write_raw_dataset(&out, &synth_polyp_raw(n, size, seed).py()?).py()
}

/// Scores a checkpoint on a dataset directory; returns the metrics table.
#[pyfunction]
fn evaluate(py: Python<'_>, checkpoint: PathBuf, data: PathBuf) -> PyResult<String> {
    py.detach(|| trainer::evaluate_checkpoint(&checkpoint, &data)).py().map(|r| r.to_tsv())
}

#[pymodule]
pub fn m2unet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(jaccard_loss, m)?)?;
    m.add_function(wrap_pyfunction!(dice, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_run, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck_names, m)?)?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
