//! Python bindings. Structured results cross the boundary as JSON and come
//! back as plain dicts and lists.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};

use ::locpred::abstraction::{
    prepare_dataset, read_dataset, write_dataset, DatasetHeader, DatasetParams, GridSpec, PrepareParams, RegionScaling,
    Sample,
};
use ::locpred::error::Error;
use ::locpred::evalkit::{self, evaluate_model, split_dataset, HoPredictor, SplitSpec, SplitUnit};
use ::locpred::fedsim::{partition_users, run_rounds, FedConfig, RoundConfig};
use ::locpred::models::{self, ArchConfig, TrainConfig, Variant};
use ::locpred::trajkit::{generate_synthetic, parse_trajectories, write_trajectories, Mode, SessionParams, SynthConfig};
use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Format(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn open(path: &str) -> PyResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))
}

fn create(path: &str) -> PyResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| PyIOError::new_err(format!("{path}: {e}")))
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

fn split_unit(s: &str) -> PyResult<SplitUnit> {
    match s {
        "sample" => Ok(SplitUnit::Sample),
        "user" => Ok(SplitUnit::User),
        _ => Err(PyValueError::new_err(format!("unit must be 'sample' or 'user', got '{s}'"))),
    }
}

/// Writes a synthetic trajectory CSV and returns the number of points.
#[pyfunction]
#[pyo3(signature = (path, users=20, minutes=120, seed=0, anchors=4, max_dwell=3))]
fn generate(py: Python<'_>, path: &str, users: usize, minutes: usize, seed: u64, anchors: usize, max_dwell: usize) -> PyResult<usize> {
    let cfg = SynthConfig {
        n_users: users,
        duration_minutes: minutes,
        seed,
        n_anchors_per_user: anchors,
        max_dwell_minutes: max_dwell,
        ..SynthConfig::default()
    };
    let points = py.detach(|| generate_synthetic(&cfg)).map_err(err)?;
    let mut w = create(path)?;
    write_trajectories(&mut w, &points).map_err(err)?;
    w.flush()?;
    Ok(points.len())
}

/// Labeled samples plus the parameters that produced them.
#[pyclass(module = "locpred")]
struct Dataset {
    header: DatasetHeader,
    samples: Vec<Sample>,
}

impl Dataset {
    fn subset(&self, samples: Vec<Sample>) -> Self {
        let mut header = self.header.clone();
        header.n_samples = samples.len();
        Self { header, samples }
    }
}

#[pymethods]
impl Dataset {
    /// Preprocesses a trajectory CSV.
    #[staticmethod]
    #[pyo3(signature = (path, mode="walk", cell_size=20.0, region=200.0, seq_len=9, horizon=1, bound=None, history_fraction=0.75, raw_counts=false))]
    #[allow(clippy::too_many_arguments)]
    fn from_csv(
        py: Python<'_>,
        path: &str,
        mode: &str,
        cell_size: f64,
        region: f64,
        seq_len: usize,
        horizon: u32,
        bound: Option<f64>,
        history_fraction: f64,
        raw_counts: bool,
    ) -> PyResult<Self> {
        let mode: Mode = parse(mode)?;
        let params = PrepareParams {
            dataset: DatasetParams {
                spec: GridSpec::new(cell_size, region).map_err(err)?,
                seq_len_locations: seq_len,
                horizon,
                bound_m: bound.unwrap_or_else(|| SynthConfig::default().v_max()),
                drop_standing_still: true,
                scaling: if raw_counts { RegionScaling::RawCounts } else { RegionScaling::MaxNormalized },
            },
            session: SessionParams { interval_s: 60, gap_threshold_s: 180 },
            history_fraction,
        };
        let tracks = parse_trajectories(open(path)?, mode).map_err(err)?;
        let prepared = py.detach(|| prepare_dataset(&tracks, mode, &params)).map_err(err)?;
        let built = prepared.built;
        let header = DatasetHeader { params: params.dataset, n_samples: built.samples.len(), stats: built.stats };
        Ok(Self { header, samples: built.samples })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (header, samples) = read_dataset(open(path)?).map_err(err)?;
        Ok(Self { header, samples })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let mut w = create(path)?;
        write_dataset(&mut w, &self.header.params, &self.header.stats, &self.samples).map_err(err)?;
        Ok(w.flush()?)
    }

    fn __len__(&self) -> usize {
        self.samples.len()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, k={}, m={})", self.samples.len(), self.header.k(), self.header.m())
    }

    #[getter]
    fn m(&self) -> usize {
        self.header.m()
    }

    #[getter]
    fn k(&self) -> usize {
        self.header.k()
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.header.stats)
    }

    fn users(&self) -> Vec<String> {
        let mut u: Vec<String> = self.samples.iter().map(|s| s.user_id.clone()).collect();
        u.sort();
        u.dedup();
        u
    }

    /// Class index of every sample.
    fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label.class_index).collect()
    }

    /// One sample as a dict with `sequence`, `region`, `label` and `user_id`.
    fn sample<'py>(&self, py: Python<'py>, index: usize) -> PyResult<Bound<'py, PyAny>> {
        let s = self.samples.get(index).ok_or_else(|| PyIndexError::new_err(index))?;
        to_py(py, s)
    }

    /// Disjoint 4:1:1 train, validation and test parts.
    #[pyo3(signature = (unit="sample", seed=0))]
    fn split(&self, unit: &str, seed: u64) -> PyResult<(Self, Self, Self)> {
        let s = split_dataset(&self.samples, &SplitSpec::four_one_one(split_unit(unit)?, seed)).map_err(err)?;
        Ok((self.subset(s.train), self.subset(s.val), self.subset(s.test)))
    }
}

#[pyclass(module = "locpred")]
struct Model {
    inner: models::Model,
}

fn presets(preset: &str, variant: Variant, m: usize, k: usize, seed: u64) -> PyResult<(ArchConfig, TrainConfig)> {
    match preset {
        "desk" => Ok((ArchConfig::desk(variant, m, k, seed), TrainConfig::desk(seed))),
        "full" => Ok((ArchConfig::full(variant, m, k, seed), TrainConfig::full(seed))),
        _ => Err(PyValueError::new_err(format!("preset must be 'desk' or 'full', got '{preset}'"))),
    }
}

#[pymethods]
impl Model {
    /// Fresh model; `variant` is fglp, bilstm or cnn.
    #[new]
    #[pyo3(signature = (m, k, variant="fglp", preset="desk", seed=0))]
    fn new(m: usize, k: usize, variant: &str, preset: &str, seed: u64) -> PyResult<Self> {
        let (arch, _) = presets(preset, parse(variant)?, m, k, seed)?;
        Ok(Self { inner: models::Model::build(&arch).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: models::Model::load(open(path)?).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        let mut w = create(path)?;
        self.inner.save(&mut w).map_err(err)?;
        Ok(w.flush()?)
    }

    fn __repr__(&self) -> String {
        let a = &self.inner.arch;
        format!("Model(variant={}, m={}, k={}, parameters={})", a.variant, a.m, a.k, self.inner.params.n_scalars())
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.arch.variant.to_string()
    }

    #[getter]
    fn n_parameters(&self) -> usize {
        self.inner.params.n_scalars()
    }

    fn arch<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.arch)
    }

    /// Trains with early stopping on validation accuracy and returns the history.
    #[pyo3(signature = (train, val, epochs=None, patience=None, batch_size=None, lr=None, seed=None, preset="desk"))]
    #[allow(clippy::too_many_arguments)]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        train: &Dataset,
        val: &Dataset,
        epochs: Option<usize>,
        patience: Option<usize>,
        batch_size: Option<usize>,
        lr: Option<f64>,
        seed: Option<u64>,
        preset: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        let a = &self.inner.arch;
        let (_, d) = presets(preset, a.variant, a.m, a.k, seed.unwrap_or(a.seed))?;
        let cfg = TrainConfig {
            max_epochs: epochs.unwrap_or(d.max_epochs),
            patience: patience.unwrap_or(d.patience),
            batch_size: batch_size.unwrap_or(d.batch_size),
            lr: lr.unwrap_or(d.lr),
            seed: d.seed,
        };
        let model = &mut self.inner;
        let history = py.detach(|| models::fit(model, &train.samples, &val.samples, &cfg)).map_err(err)?;
        to_py(py, &history)
    }

    /// Loss, accuracy and weighted F1 on a dataset.
    fn evaluate<'py>(&self, py: Python<'py>, data: &Dataset) -> PyResult<Bound<'py, PyAny>> {
        let report = py.detach(|| evaluate_model(&self.inner, &data.samples)).map_err(err)?;
        to_py(py, &report)
    }

    /// Most probable cell for one sample and the full probability vector.
    fn predict(&self, data: &Dataset, index: usize) -> PyResult<(usize, Vec<f64>)> {
        let s = data.samples.get(index).ok_or_else(|| PyIndexError::new_err(index))?;
        models::predict_cell(&self.inner, &s.sequence, &s.region).map_err(err)
    }

    /// Probability rows for every sample.
    fn predict_proba(&self, py: Python<'_>, data: &Dataset) -> PyResult<Vec<Vec<f64>>> {
        let probs = py.detach(|| models::predict_probs(&self.inner, &data.samples)).map_err(err)?;
        let n = self.inner.n_classes();
        Ok(probs.data().chunks(n).map(<[f64]>::to_vec).collect())
    }
}

/// Metrics of the historic-occupancy baseline.
#[pyfunction]
#[pyo3(signature = (data, seed=0))]
fn evaluate_ho<'py>(py: Python<'py>, data: &Dataset, seed: u64) -> PyResult<Bound<'py, PyAny>> {
    let report = evaluate_model(&HoPredictor { m: data.header.m(), seed }, &data.samples).map_err(err)?;
    to_py(py, &report)
}

/// Federated training over a user partition of `data`. Returns the best
/// round's model and a report with the per-round history.
#[pyfunction]
#[pyo3(signature = (data, rounds=10, clients_per_round=10, augmentation=true, aug_user_fraction=0.05, seed=0, split_seed=0, jobs=1))]
#[allow(clippy::too_many_arguments)]
fn federated<'py>(
    py: Python<'py>,
    data: &Dataset,
    rounds: usize,
    clients_per_round: usize,
    augmentation: bool,
    aug_user_fraction: f64,
    seed: u64,
    split_seed: u64,
    jobs: usize,
) -> PyResult<(Model, Bound<'py, PyAny>)> {
    let (arch, pretrain) = presets("desk", Variant::Fglp, data.header.m(), data.header.k(), seed)?;
    let cfg = FedConfig {
        rounds,
        round: RoundConfig { clients_per_round, ..RoundConfig::desk() },
        augmentation,
        pretrain,
        seed,
    };
    let (outcome, partition) = py
        .detach(|| {
            let (mut fed, partition) = partition_users(&data.samples, aug_user_fraction, split_seed)?;
            Ok((run_rounds(&arch, &mut fed, &cfg, jobs)?, partition))
        })
        .map_err(err)?;
    let report = serde_json::json!({
        "partition": partition,
        "initial": outcome.initial,
        "rounds": outcome.history,
        "best_round": outcome.best_round,
        "audit": outcome.audit,
    });
    Ok((Model { inner: outcome.model }, to_py(py, &report)?))
}

#[pyfunction]
fn accuracy(truth: Vec<usize>, predicted: Vec<usize>) -> PyResult<f64> {
    evalkit::categorical_accuracy(&truth, &predicted).map_err(err)
}

#[pyfunction]
fn weighted_f1(truth: Vec<usize>, predicted: Vec<usize>, n_classes: usize) -> PyResult<f64> {
    evalkit::weighted_f1(&truth, &predicted, n_classes).map_err(err)
}

#[pymodule]
fn locpred(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_ho, m)?)?;
    m.add_function(wrap_pyfunction!(federated, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_f1, m)?)?;
    Ok(())
}
