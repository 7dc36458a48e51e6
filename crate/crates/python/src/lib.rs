//! Python bindings: datasets, configuration, stream runs, the replay buffer
//! and a handful of numeric ops. Arrays cross the boundary as nested lists
//! (2-D) or as a flat list plus shape.

use std::path::PathBuf;

use ndarray::{Array2, Array3, Array4};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use urcl::data::{NormalizationStats, WindowBatch};
use urcl::harness::{self, ExperimentConfig, StreamData, Strategy, SynthSpec};
use urcl::loss::ViewPairEmbeddings;
use urcl::replay::{self, ReplayItem};
use urcl::UrclError;

fn err(e: UrclError) -> PyErr {
    match e {
        UrclError::Io(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(Array2::from_shape_vec((r, c), rows.into_iter().flatten().collect()).unwrap())
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

fn array3(flat: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<Array3<f64>> {
    Array3::from_shape_vec(shape, flat).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn array4(flat: Vec<f64>, shape: (usize, usize, usize, usize)) -> PyResult<Array4<f64>> {
    Array4::from_shape_vec(shape, flat).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Experiment settings, parsed from and printed as `key = value` text.
#[pyclass(name = "Config")]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text=None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => ExperimentConfig::parse(t).map_err(err)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(err)
    }

    fn hash(&self) -> String {
        self.inner.config_hash()
    }

    fn __str__(&self) -> String {
        self.inner.to_config_string()
    }
}

/// Bounded FIFO store of `(input_window, target)` pairs.
#[pyclass(name = "ReplayBuffer")]
struct PyReplayBuffer {
    inner: replay::ReplayBuffer,
}

#[pymethods]
impl PyReplayBuffer {
    #[new]
    fn new(capacity: usize) -> Self {
        Self { inner: replay::ReplayBuffer::new(capacity) }
    }

    /// `input` has shape `(M, V, C)`, `target` has shape `(N, V, 1)`.
    fn push(
        &mut self,
        input: Vec<f64>,
        input_shape: (usize, usize, usize),
        target: Vec<f64>,
        target_shape: (usize, usize, usize),
    ) -> PyResult<()> {
        self.inner.push(array3(input, input_shape)?, array3(target, target_shape)?).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn capacity(&self) -> usize {
        self.inner.capacity()
    }

    /// Insertion counters of the stored items, oldest first.
    fn counters(&self) -> Vec<u64> {
        self.inner.items().map(|i| i.insert_counter).collect()
    }

    /// Flat input window of item `i`.
    fn input(&self, i: usize) -> PyResult<Vec<f64>> {
        self.inner
            .get(i)
            .map(|it| it.input_window.iter().copied().collect())
            .ok_or_else(|| PyValueError::new_err("index out of range"))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: replay::ReplayBuffer::load(&path).map_err(err)? })
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

/// Writes a synthetic regime-shifting stream to `out` in the dataset layout.
#[pyfunction]
fn synth(out: PathBuf, nodes: usize, segments: usize, slots: usize, seed: u64) -> PyResult<()> {
    let (network, series) = harness::synthetic_stream(&SynthSpec::new(nodes, segments, slots, seed)).map_err(err)?;
    urcl::data::write_dataset(&out, &network, &series).map_err(err)
}

/// Loads a dataset directory and describes it.
#[pyfunction]
fn dataset_info<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyDict>> {
    let (network, series) = urcl::data::load_dataset(&path).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("nodes", network.node_count())?;
    d.set_item("edges", network.edges().len())?;
    d.set_item("directed", network.directed())?;
    d.set_item("slots", series.len())?;
    d.set_item("channels", series.channels())?;
    Ok(d)
}

/// Trains over the stream in `data` and returns one dict per segment.
#[pyfunction]
#[pyo3(signature = (data, config, strategy, out=None))]
fn run<'py>(
    py: Python<'py>,
    data: PathBuf,
    config: &PyConfig,
    strategy: &str,
    out: Option<PathBuf>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut cfg = config.inner.clone();
    cfg.strategy = strategy.parse::<Strategy>().map_err(err)?;
    let (network, series) = urcl::data::load_dataset(&data).map_err(err)?;
    let prepared = StreamData::prepare(network, &series, &cfg).map_err(err)?;
    let outcome = py
        .detach(|| harness::run_stream_experiment(&prepared, &cfg, out.as_deref(), None))
        .map_err(err)?;
    outcome
        .reports
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("segment", r.role.to_string())?;
            d.set_item("strategy", r.strategy.as_str())?;
            d.set_item("mae", r.test_mae)?;
            d.set_item("rmse", r.test_rmse)?;
            d.set_item("epochs", r.epochs.len())?;
            d.set_item("train_seconds", r.train_seconds)?;
            Ok(d)
        })
        .collect()
}

/// Symmetric contrastive loss over two views; each argument is `S x D`.
#[pyfunction]
fn graphcl_loss(p1: Vec<Vec<f64>>, p2: Vec<Vec<f64>>, z1: Vec<Vec<f64>>, z2: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let pairs = ViewPairEmbeddings { p1: matrix(p1)?, p2: matrix(p2)?, z1: matrix(z1)?, z2: matrix(z2)? };
    urcl::loss::graphcl_batch_loss(&pairs, tau).map_err(err)
}

#[pyfunction]
fn pearson_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    replay::pearson_similarity(&a, &b).map_err(err)
}

/// Row-softmax of `relu(e1 @ e2.T)`.
#[pyfunction]
fn adaptive_adjacency(e1: Vec<Vec<f64>>, e2: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let (e1, e2) = (matrix(e1)?, matrix(e2)?);
    if e1.dim() != e2.dim() {
        return Err(PyValueError::new_err("embedding shapes differ"));
    }
    Ok(rows(&urcl::model::adaptive_adjacency(&e1, &e2)))
}

/// `(MAE, RMSE)` of two equally long sequences.
#[pyfunction]
fn metrics(prediction: Vec<f64>, target: Vec<f64>) -> PyResult<(f64, f64)> {
    let n = prediction.len();
    if target.len() != n {
        return Err(PyValueError::new_err("length mismatch"));
    }
    let stats = NormalizationStats { per_channel_min: vec![0.0], per_channel_max: vec![1.0] };
    let p = array4(prediction, (n, 1, 1, 1))?;
    let t = array4(target, (n, 1, 1, 1))?;
    harness::metrics_denormalized(&p, &t, &stats).map_err(err)
}

/// Mixes a batch with replayed pairs using a fixed `lam`. Batch inputs have
/// shape `(B, M, V, C)` and targets `(B, N, V, 1)`; replayed items are
/// `(input, target)` flat lists with per-item shapes matching the batch.
#[pyfunction]
fn stmixup(
    inputs: Vec<f64>,
    input_shape: (usize, usize, usize, usize),
    targets: Vec<f64>,
    target_shape: (usize, usize, usize, usize),
    replayed: Vec<(Vec<f64>, Vec<f64>)>,
    lam: f64,
) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let current = WindowBatch {
        inputs: array4(inputs, input_shape)?,
        targets: array4(targets, target_shape)?,
        origin_slots: vec![0; input_shape.0],
    };
    let (_, m, v, c) = input_shape;
    let (_, n, tv, tc) = target_shape;
    let items = replayed
        .into_iter()
        .enumerate()
        .map(|(i, (x, y))| {
            Ok(ReplayItem { input_window: array3(x, (m, v, c))?, target: array3(y, (n, tv, tc))?, insert_counter: i as u64 })
        })
        .collect::<PyResult<Vec<_>>>()?;
    let refs: Vec<&ReplayItem> = items.iter().collect();
    let mixed = replay::stmixup_with_lambda(&current, &refs, lam).map_err(err)?;
    Ok((mixed.inputs.iter().copied().collect(), mixed.targets.iter().copied().collect()))
}

/// One draw from `Beta(alpha, alpha)`.
#[pyfunction]
fn draw_lambda(alpha: f64, seed: u64) -> PyResult<f64> {
    replay::draw_lambda(alpha, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)
}

/// Parameter names and shapes stored in a model checkpoint, plus its config hash.
#[pyfunction]
fn checkpoint_contents(path: PathBuf) -> PyResult<(Vec<(String, Vec<usize>)>, String)> {
    let (params, hash) = urcl::model::ParamSet::load(&path).map_err(err)?;
    Ok((params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(), hash))
}

#[pymodule]
pub fn urcl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyReplayBuffer>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_info, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(graphcl_loss, m)?)?;
    m.add_function(wrap_pyfunction!(pearson_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(adaptive_adjacency, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(stmixup, m)?)?;
    m.add_function(wrap_pyfunction!(draw_lambda, m)?)?;
    m.add_function(wrap_pyfunction!(checkpoint_contents, m)?)?;
    Ok(())
}
