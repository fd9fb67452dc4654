//! Python bindings: synthetic worlds, dataset files and model training.

use std::io::BufReader;
use std::path::Path;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use stagecast::dataset::{build_dataset as build, TimeRange};
use stagecast::ingestion::format_utc;
use stagecast::models::{FcNetConfig, ForecasterConfig};
use stagecast::neural::AdamState;
use stagecast::sensor_network::GraphSpec;
use stagecast::synthetic::{gen_world, WorldConfig};
use stagecast::training::{self, TrainError};
use stagecast::{
    Checkpoint, Dataset, DatasetVariant, ModelConfig, Network, PrecipFieldSeries, SensorGraph, StageSeries,
    TrainConfig,
};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(path: &str, e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(format!("{path}: {e}"))
}

fn open(path: &str) -> PyResult<BufReader<std::fs::File>> {
    std::fs::File::open(path)
        .map(BufReader::new)
        .map_err(|e| io_err(path, e))
}

/// Parses a `[world]`-less TOML table of world settings.
pub fn world_config(toml_text: Option<&str>) -> Result<WorldConfig, String> {
    match toml_text {
        Some(t) => toml::from_str(t).map_err(|e| e.to_string()),
        None => Ok(WorldConfig::default()),
    }
}

/// Architecture for `kind` ("fc" or "gru") on `variant`.
pub fn model_config(kind: &str, variant: DatasetVariant, gru_width: Option<usize>) -> Result<ModelConfig, String> {
    let c = match (kind, gru_width) {
        ("fc", None) => ModelConfig::Fc(FcNetConfig::paper(variant)),
        ("fc", Some(_)) => return Err("gru_width applies to gru models only".into()),
        ("gru", None) => ModelConfig::Gru(ForecasterConfig::default()),
        ("gru", Some(w)) => ModelConfig::Gru(ForecasterConfig::with_gru_width(w)),
        (other, _) => return Err(format!("unknown model kind `{other}` (fc|gru)")),
    };
    c.validate().map_err(|e| e.to_string())?;
    Ok(c)
}

fn train_err(e: TrainError) -> PyErr {
    match e {
        TrainError::NonFiniteLoss { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => value_err(e),
    }
}

/// Generates a world into `out_dir`; `config` is TOML world settings.
#[pyfunction]
#[pyo3(signature = (out_dir, config = None))]
fn synth(out_dir: &str, config: Option<&str>) -> PyResult<String> {
    let cfg = world_config(config).map_err(value_err)?;
    let world = gen_world(&cfg).map_err(value_err)?;
    world.write_dir(Path::new(out_dir)).map_err(|e| io_err(out_dir, e))?;
    Ok(world.describe())
}

/// Builds a dataset file; returns `(entries, skipped)`.
#[pyfunction]
#[pyo3(signature = (graph, stage, precip, variant, out, range = None, workers = 1))]
#[allow(clippy::too_many_arguments)]
fn build_dataset(
    py: Python<'_>,
    graph: &str,
    stage: &str,
    precip: &str,
    variant: &str,
    out: &str,
    range: Option<&str>,
    workers: usize,
) -> PyResult<(usize, usize)> {
    let v: DatasetVariant = variant.parse().map_err(value_err)?;
    let g = SensorGraph::build(GraphSpec::read(open(graph)?).map_err(value_err)?).map_err(value_err)?;
    let s = StageSeries::parse(open(stage)?).map_err(value_err)?.series;
    let p = PrecipFieldSeries::parse(open(precip)?).map_err(value_err)?;
    let range: TimeRange = match range {
        Some(r) => r.parse().map_err(value_err)?,
        None => TimeRange::covering(&s).map_err(value_err)?,
    };
    let workers = workers.max(1);
    let (d, skips) = py
        .detach(|| build(range, &g, &s, &p, v, workers))
        .map_err(value_err)?;
    std::fs::write(out, d.to_bytes()).map_err(|e| io_err(out, e))?;
    Ok((d.len(), skips.len()))
}

#[pyclass(name = "Dataset", frozen)]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
        let inner = Dataset::from_bytes(&bytes).map_err(value_err)?;
        Ok(PyDataset { inner })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        std::fs::write(path, self.inner.to_bytes()).map_err(|e| io_err(path, e))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.variant().name()
    }

    /// `(sensor, time, input, output)` of entry `i`.
    fn entry(&self, i: usize) -> PyResult<(String, String, Vec<f64>, Vec<f64>)> {
        let e = self
            .inner
            .entries()
            .get(i)
            .ok_or_else(|| pyo3::exceptions::PyIndexError::new_err(i))?;
        Ok((e.sensor.to_string(), format_utc(e.t), e.input.clone(), e.output.clone()))
    }

    /// Keeps only entries on whole hours.
    fn hourly(&self) -> Self {
        use stagecast::ingestion::is_hour_aligned;
        PyDataset {
            inner: self.inner.filter(|e| is_hour_aligned(e.t)),
        }
    }

    /// `(train, test)` with the given share of entries in `train`.
    #[pyo3(signature = (train_fraction = 0.8, seed = 0, chronological = false))]
    fn split(&self, train_fraction: f64, seed: u64, chronological: bool) -> PyResult<(Self, Self)> {
        use stagecast::dataset::{split, SplitMode};
        let mode = if chronological {
            SplitMode::Chronological
        } else {
            SplitMode::Random
        };
        let (a, b) = split(&self.inner, train_fraction, seed, mode).map_err(value_err)?;
        Ok((PyDataset { inner: a }, PyDataset { inner: b }))
    }

    fn persistence_mse(&self) -> PyResult<f64> {
        training::persistence_mse(&self.inner).map_err(train_err)
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    net: Network,
    adam: AdamState,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (kind, variant = "larger", seed = 0, gru_width = None))]
    fn new(kind: &str, variant: &str, seed: u64, gru_width: Option<usize>) -> PyResult<Self> {
        let v: DatasetVariant = variant.parse().map_err(value_err)?;
        let c = model_config(kind, v, gru_width).map_err(value_err)?;
        let net = Network::new(c, seed).map_err(value_err)?;
        let adam = AdamState::new(Default::default(), net.params());
        Ok(PyModel { net, adam })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = Checkpoint::load(Path::new(path)).map_err(value_err)?;
        let net = Network::from_checkpoint(&ck).map_err(value_err)?;
        Ok(PyModel { net, adam: ck.adam })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.net
            .checkpoint(&self.adam)
            .save(Path::new(path))
            .map_err(|e| io_err(path, e))
    }

    /// Canonical one-line architecture description.
    #[getter]
    fn config(&self) -> String {
        self.net.config().to_string()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.net.params().num_scalars()
    }

    /// Trains in place; returns the per-epoch losses.
    #[pyo3(signature = (data, epochs = 20, batch_size = 64, seed = 0, lr = 1e-3))]
    fn train(
        &mut self,
        py: Python<'_>,
        data: &PyDataset,
        epochs: usize,
        batch_size: usize,
        seed: u64,
        lr: f64,
    ) -> PyResult<Vec<f64>> {
        let mut cfg = TrainConfig {
            epochs,
            batch_size,
            seed,
            ..TrainConfig::default()
        };
        cfg.adam.lr = lr;
        let net = &mut self.net;
        let (ck, report) = py
            .detach(|| training::train(net, &data.inner, &cfg))
            .map_err(train_err)?;
        self.adam = ck.adam;
        Ok(report.epoch_losses)
    }

    #[pyo3(signature = (data, workers = 1))]
    fn evaluate(&self, py: Python<'_>, data: &PyDataset, workers: usize) -> PyResult<f64> {
        let workers = workers.max(1);
        py.detach(|| training::evaluate(&self.net, &data.inner, workers))
            .map_err(train_err)
    }

    fn predict(&self, input: Vec<f64>) -> PyResult<Vec<f64>> {
        training::predict_input(&self.net, &input).map_err(train_err)
    }
}

#[pymodule]
fn stagecast_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(build_dataset, m)?)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
