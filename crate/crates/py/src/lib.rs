//! Python bindings: the model with its training, evaluation,
//! explanation, and checkpointing entry points, plus window planning,
//! synthetic data generation, the learning-rate schedule, and the
//! analytic attention-cost model.

use fwt_core::data::{synth_generate, RoiTimeSeries, SynthSpec};
use fwt_core::diffcore::Array;
use fwt_core::error::Error;
use fwt_core::explain::explain_series;
use fwt_core::fwmsa::{plan_windows as core_plan_windows, WindowSpec};
use fwt_core::harness::{
    evaluate, flop_model, one_cycle_lr, parse_run_config, train as core_train, TrainConfig,
};
use fwt_core::model::{load_checkpoint, save_checkpoint, Model as CoreModel, ModelConfig};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

fn py_err(e: Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Render kwargs as config lines, lowercasing Python booleans.
fn kwargs_to_lines(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<String> {
    let mut text = String::new();
    if let Some(d) = kwargs {
        for (k, v) in d.iter() {
            let key = k.str()?.to_string();
            let mut val = v.str()?.to_string();
            if val == "True" || val == "False" {
                val = val.to_lowercase();
            }
            text.push_str(&format!("{}={}\n", key, val));
        }
    }
    Ok(text)
}

fn config_from_kwargs(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<ModelConfig> {
    let (cfg, tc) = parse_run_config(&kwargs_to_lines(kwargs)?).map_err(py_err)?;
    if tc != TrainConfig::default() {
        return Err(PyValueError::new_err(
            "training keys (epochs, batch_size, lr_*, warm_frac, seed, crop_len) belong to train()",
        ));
    }
    Ok(cfg)
}

fn train_config_from_kwargs(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<TrainConfig> {
    let (cfg, tc) = parse_run_config(&kwargs_to_lines(kwargs)?).map_err(py_err)?;
    if cfg != ModelConfig::default() {
        return Err(PyValueError::new_err(
            "model keys are fixed at construction; train() only accepts training keys",
        ));
    }
    Ok(tc)
}

/// T x N nested rows to a series array.
fn series_from_rows(rows: &[Vec<f32>]) -> PyResult<Array<f32>> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(PyValueError::new_err("series must be a non-empty T x N list"));
    }
    let n = rows[0].len();
    let mut flat = Vec::with_capacity(rows.len() * n);
    for (i, row) in rows.iter().enumerate() {
        if row.len() != n {
            return Err(PyValueError::new_err(format!(
                "row {} has {} values, expected {}",
                i,
                row.len(),
                n
            )));
        }
        flat.extend_from_slice(row);
    }
    Array::from_vec(&[rows.len(), n], flat).map_err(py_err)
}

fn dataset_from_lists(
    data: Vec<Vec<Vec<f32>>>,
    labels: Vec<usize>,
) -> PyResult<Vec<RoiTimeSeries>> {
    if data.len() != labels.len() {
        return Err(PyValueError::new_err(format!(
            "{} samples but {} labels",
            data.len(),
            labels.len()
        )));
    }
    data.iter()
        .zip(&labels)
        .map(|(rows, &label)| {
            Ok(RoiTimeSeries {
                values: series_from_rows(rows)?,
                label,
                meta: None,
            })
        })
        .collect()
}

fn series_to_rows(values: &Array<f32>) -> Vec<Vec<f32>> {
    let (t, n) = values.dims();
    (0..t)
        .map(|r| values.data()[r * n..(r + 1) * n].to_vec())
        .collect()
}

/// A fused-window transformer classifier.
#[pyclass(module = "fwt")]
struct Model {
    inner: CoreModel<f32>,
}

#[pymethods]
impl Model {
    /// Fresh model. `t_ref` is the reference series length (the fixed
    /// length when windowing is disabled). Remaining keyword arguments
    /// override model configuration keys, e.g. model_dim=16, window=10.
    #[new]
    #[pyo3(signature = (t_ref = 60, seed = 0, **overrides))]
    fn new(t_ref: usize, seed: u64, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let cfg = config_from_kwargs(overrides)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = CoreModel::init(cfg, t_ref, &mut rng).map_err(py_err)?;
        Ok(Model { inner })
    }

    /// The configuration as a dict of the flat config keys.
    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new_bound(py);
        for (k, v) in fwt_core::model::config_entries(&self.inner.cfg) {
            d.set_item(k, v)?;
        }
        Ok(d)
    }

    #[getter]
    fn t_ref(&self) -> usize {
        self.inner.t_ref
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.cfg.num_classes
    }

    /// Train on samples (each a T x N list) with integer labels,
    /// replacing this model's parameters. Accepts training keys as
    /// keyword arguments (epochs, batch_size, lr_low, lr_peak, lr_final,
    /// warm_frac, seed, crop_len). Returns the per-epoch log as dicts.
    #[pyo3(signature = (train_data, train_labels, val_data, val_labels, **options))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        train_data: Vec<Vec<Vec<f32>>>,
        train_labels: Vec<usize>,
        val_data: Vec<Vec<Vec<f32>>>,
        val_labels: Vec<usize>,
        options: Option<&Bound<'py, PyDict>>,
    ) -> PyResult<Bound<'py, PyList>> {
        let mut tc = train_config_from_kwargs(options)?;
        if options.map_or(true, |d| !d.contains("crop_len").unwrap_or(false)) {
            tc.crop_len = self.inner.t_ref;
        }
        let train_set = dataset_from_lists(train_data, train_labels)?;
        let val_set = dataset_from_lists(val_data, val_labels)?;
        let (model, rows) = core_train(&train_set, &val_set, &self.inner.cfg, &tc).map_err(py_err)?;
        self.inner = model;
        let out = PyList::empty_bound(py);
        for r in rows {
            let d = PyDict::new_bound(py);
            d.set_item("epoch", r.epoch)?;
            d.set_item("lr", r.lr)?;
            d.set_item("train_loss", r.train_loss)?;
            d.set_item("ce", r.ce)?;
            d.set_item("cwr", r.cwr)?;
            d.set_item("val_acc", r.val_acc)?;
            d.set_item("val_auroc", r.val_auroc)?;
            out.append(d)?;
        }
        Ok(out)
    }

    /// Class logits for one T x N series.
    fn predict(&self, series: Vec<Vec<f32>>) -> PyResult<Vec<f32>> {
        let values = series_from_rows(&series)?;
        self.inner.predict(&values).map_err(py_err)
    }

    /// (accuracy, auroc) over samples with labels.
    fn evaluate(
        &self,
        data: Vec<Vec<Vec<f32>>>,
        labels: Vec<usize>,
    ) -> PyResult<(f64, f64)> {
        let set = dataset_from_lists(data, labels)?;
        let report = evaluate(&self.inner, &set).map_err(py_err)?;
        Ok((report.accuracy, report.auroc))
    }

    /// Explain one decision. Returns a dict with the explained class,
    /// the logits, per-time-point importance weights, the top-k time
    /// points, and the full (F+T) x (F+T) relevancy map.
    #[pyo3(signature = (series, class_index = None, top = 5))]
    fn explain<'py>(
        &self,
        py: Python<'py>,
        series: Vec<Vec<f32>>,
        class_index: Option<usize>,
        top: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let values = series_from_rows(&series)?;
        let expl = explain_series(&self.inner, &values, class_index).map_err(py_err)?;
        let k = top.clamp(1, expl.importance.len());
        let landmarks =
            fwt_core::explain::top_k_landmarks(&expl.importance, k).map_err(py_err)?;
        let n = expl.map.f + expl.map.t;
        let map: Vec<Vec<f64>> = (0..n)
            .map(|r| expl.map.mat.data[r * n..(r + 1) * n].to_vec())
            .collect();
        let d = PyDict::new_bound(py);
        d.set_item("class", expl.class)?;
        d.set_item("logits", expl.logits)?;
        d.set_item("importance", expl.importance)?;
        d.set_item("top", landmarks)?;
        d.set_item("f", expl.map.f)?;
        d.set_item("map", map)?;
        Ok(d)
    }

    /// Write a checkpoint.
    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(Path::new(path), &self.inner).map_err(py_err)
    }

    /// Load a checkpoint.
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Model {
            inner: load_checkpoint(Path::new(path)).map_err(py_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(t_ref={}, model_dim={}, heads={}, blocks={}, window={}, classes={})",
            self.inner.t_ref,
            self.inner.cfg.model_dim,
            self.inner.cfg.heads,
            self.inner.cfg.blocks(),
            self.inner.cfg.window.window,
            self.inner.cfg.num_classes
        )
    }
}

/// Window geometry for a series of length t: window count, stride,
/// anchors, per-block fringe widths, receptive fields, and coverage.
#[pyfunction]
#[pyo3(signature = (t, window = 20, alpha = 0.4, beta = 2, blocks = 4))]
fn plan_windows<'py>(
    py: Python<'py>,
    t: usize,
    window: usize,
    alpha: f64,
    beta: usize,
    blocks: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = WindowSpec {
        window,
        alpha,
        beta,
        blocks,
    };
    let layout = core_plan_windows(t, &spec).map_err(py_err)?;
    let d = PyDict::new_bound(py);
    d.set_item("f", layout.f())?;
    d.set_item("stride", spec.stride())?;
    d.set_item("anchors", layout.anchors.clone())?;
    d.set_item("l_per_block", layout.l_per_block.clone())?;
    let rf: Vec<usize> = (0..blocks).map(|m| layout.receptive_field(m)).collect();
    d.set_item("receptive_fields", rf)?;
    d.set_item("cover", layout.cover.clone())?;
    Ok(d)
}

/// Synthetic planted-event dataset:
/// (train, train_labels, val, val_labels, events) where each sample is a
/// T x N list and events is a list of (onset, duration) pairs.
#[pyfunction]
#[pyo3(signature = (n_train, n_val, t = 60, channels = 16, classes = 2,
                    onsets = None, duration = 4, amplitude = 1.25,
                    noise = 0.45, smooth = 3, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn generate_synthetic(
    n_train: usize,
    n_val: usize,
    t: usize,
    channels: usize,
    classes: usize,
    onsets: Option<Vec<usize>>,
    duration: usize,
    amplitude: f64,
    noise: f64,
    smooth: usize,
    seed: u64,
) -> PyResult<(
    Vec<Vec<Vec<f32>>>,
    Vec<usize>,
    Vec<Vec<Vec<f32>>>,
    Vec<usize>,
    Vec<(usize, usize)>,
)> {
    let spec = SynthSpec {
        t,
        n: channels,
        num_classes: classes,
        onsets: onsets.unwrap_or_else(|| SynthSpec::default().onsets),
        duration,
        amplitude,
        noise,
        smooth_width: smooth,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tr = synth_generate(&spec, n_train, &mut rng).map_err(py_err)?;
    let va = synth_generate(&spec, n_val, &mut rng).map_err(py_err)?;
    let split = |set: Vec<RoiTimeSeries>| -> (Vec<Vec<Vec<f32>>>, Vec<usize>) {
        let labels = set.iter().map(|s| s.label).collect();
        let rows = set.iter().map(|s| series_to_rows(&s.values)).collect();
        (rows, labels)
    };
    let (trd, trl) = split(tr);
    let (vad, val) = split(va);
    Ok((trd, trl, vad, val, spec.events()))
}

/// Learning rate at `step` of `total_steps` under the one-cycle policy.
#[pyfunction]
#[pyo3(signature = (step, total_steps, lr_low = 2e-4, lr_peak = 5e-4,
                    lr_final = 2e-5, warm_frac = 0.3))]
fn one_cycle(
    step: usize,
    total_steps: usize,
    lr_low: f64,
    lr_peak: f64,
    lr_final: f64,
    warm_frac: f64,
) -> PyResult<f64> {
    let tc = TrainConfig {
        lr_low,
        lr_peak,
        lr_final,
        warm_frac,
        ..TrainConfig::default()
    };
    one_cycle_lr(step, total_steps, &tc).map_err(py_err)
}

/// Analytic attention cost (multiply-accumulates) at series length t.
/// Keyword arguments override model configuration keys.
#[pyfunction]
#[pyo3(signature = (t, **overrides))]
fn flop_report<'py>(
    py: Python<'py>,
    t: usize,
    overrides: Option<&Bound<'py, PyDict>>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = config_from_kwargs(overrides)?;
    let r = flop_model(&cfg, t).map_err(py_err)?;
    let d = PyDict::new_bound(py);
    d.set_item("t", r.t)?;
    d.set_item("f", r.f)?;
    d.set_item("window", r.window)?;
    d.set_item("stride", r.stride)?;
    d.set_item("l_per_block", r.l_per_block.clone())?;
    d.set_item("per_block", r.per_block.clone())?;
    d.set_item("qk", r.qk)?;
    d.set_item("total", r.total)?;
    Ok(d)
}

#[pymodule]
fn fwt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(plan_windows, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(one_cycle, m)?)?;
    m.add_function(wrap_pyfunction!(flop_report, m)?)?;
    m.add("__all__", vec![
        "Model",
        "plan_windows",
        "generate_synthetic",
        "one_cycle",
        "flop_report",
    ])?;
    Ok(())
}
