//! Python bindings. Matrices cross the boundary as lists of row lists.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use wpgrec::config::Config;
use wpgrec::data::{self, Dataset, LogFormat, Phase};
use wpgrec::eval::{self, EvalOptions, MetricsReport, RankResult, DEFAULT_KS};
use wpgrec::graph::{build_bipartite, propagate, scaled_laplacian, ChebyLayerParams};
use wpgrec::model::check::{end_to_end_check, micro_config};
use wpgrec::model::Model;
use wpgrec::optim::ParameterStore;
use wpgrec::{synth, train, wavelet, Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for wpgrec::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn tensor(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    Tensor::from_rows(rows).py()
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn metrics(report: &MetricsReport) -> HashMap<String, f64> {
    report.rows.iter().map(|r| (format!("{}@{}", r.metric, r.k), r.value)).collect()
}

fn phase(name: &str) -> PyResult<Phase> {
    name.parse().py()
}

#[pyclass(name = "Dataset", module = "wpgrec")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    /// Parses `user<TAB>item<TAB>timestamp` lines, applies k-core filtering
    /// and the leave-one-out split.
    #[staticmethod]
    #[pyo3(signature = (text, kcore = 5))]
    fn from_tsv(text: &str, kcore: usize) -> PyResult<Self> {
        let log = data::parse_interactions_str(text, LogFormat::Tsv).py()?;
        Ok(Self { inner: data::prepare(&log, kcore).py()? })
    }

    /// One of the built-in generated corpora: micro, overfit, planted, standin.
    #[staticmethod]
    #[pyo3(signature = (name, seed = 0, kcore = 1))]
    fn synthetic(name: &str, seed: u64, kcore: usize) -> PyResult<Self> {
        let log = match name {
            "micro" => synth::micro_log(seed),
            "overfit" => synth::overfit_log(seed),
            "planted" => synth::planted_log(&synth::PlantedConfig::default(), seed),
            "standin" => synth::standin_log(&synth::StandInConfig::default(), seed),
            _ => return Err(PyValueError::new_err(format!("unknown synthetic corpus '{name}'"))),
        };
        Ok(Self { inner: data::prepare(&log, kcore).py()? })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: data::read_prepared(&dir).py()? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        data::write_prepared(&dir, &self.inner).py()
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.inner.num_users()
    }

    #[getter]
    fn num_items(&self) -> usize {
        self.inner.num_items()
    }

    #[getter]
    fn user_ids(&self) -> Vec<String> {
        self.inner.user_ids.clone()
    }

    fn stats(&self) -> HashMap<&'static str, f64> {
        let s = &self.inner.stats;
        HashMap::from([
            ("num_users", s.num_users as f64),
            ("num_items", s.num_items as f64),
            ("num_interactions", s.num_interactions as f64),
            ("sparsity", s.sparsity),
            ("avg_length", s.avg_length),
        ])
    }

    /// Dense item ids of one user's input for `phase`.
    #[pyo3(signature = (user, phase = "test"))]
    fn input(&self, user: usize, phase: &str) -> PyResult<Vec<usize>> {
        if user >= self.inner.num_users() {
            return Err(PyValueError::new_err(format!("user {user} out of range")));
        }
        Ok(self.inner.input(user, self::phase(phase)?).to_vec())
    }

    #[pyo3(signature = (phase = "test"))]
    fn popularity(&self, phase: &str) -> PyResult<HashMap<String, f64>> {
        let r = eval::evaluate_popularity(&self.inner, self::phase(phase)?, &DEFAULT_KS, EvalOptions::default()).py()?;
        Ok(metrics(&r))
    }

    fn __repr__(&self) -> String {
        format!("Dataset(users={}, items={})", self.inner.num_users(), self.inner.num_items())
    }
}

#[pyclass(name = "Config", module = "wpgrec", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: Config,
}

#[pymethods]
impl PyConfig {
    /// Defaults with the `key = value` lines of `text` applied.
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self { inner: Config::parse_str(text).py()? })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).py()?;
        self.inner.validate().py()
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner.get(key).py()
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        Config::KEYS.to_vec()
    }
}

/// A model with trained parameters.
#[pyclass(name = "Trained", module = "wpgrec", unsendable)]
struct PyTrained {
    model: Model,
    store: ParameterStore,
    #[pyo3(get)]
    best_epoch: usize,
    #[pyo3(get)]
    valid_curve: Vec<f64>,
}

#[pymethods]
impl PyTrained {
    /// Trains one seed and keeps the parameters of the best validation epoch.
    #[staticmethod]
    #[pyo3(signature = (dataset, config = None, seed = 42))]
    fn fit(dataset: &PyDataset, config: Option<&PyConfig>, seed: u64) -> PyResult<Self> {
        let cfg = config.map_or_else(Config::default, |c| c.inner.clone());
        let out = train::train(&dataset.inner, &cfg.model, &cfg.train, cfg.eval, seed, &cfg.to_text(), |_| {}).py()?;
        Ok(Self {
            best_epoch: out.manifest.best_epoch,
            valid_curve: out.manifest.epochs.iter().map(|e| e.valid_ndcg10).collect(),
            model: out.model,
            store: out.best,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf, dataset: &PyDataset) -> PyResult<Self> {
        let (meta, store) = train::load_checkpoint(&path).py()?;
        let model = train::model_for_checkpoint(&meta, &store, &dataset.inner).py()?;
        Ok(Self {
            model,
            store,
            best_epoch: 0,
            valid_curve: Vec::new(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        train::save_checkpoint(&path, &self.model, &self.store).py()
    }

    #[pyo3(signature = (dataset, phase = "test"))]
    fn evaluate(&self, dataset: &PyDataset, phase: &str) -> PyResult<HashMap<String, f64>> {
        let r = train::evaluate_model(&self.model, &self.store, &dataset.inner, self::phase(phase)?, &DEFAULT_KS, EvalOptions::default(), "")
            .py()?;
        Ok(metrics(&r))
    }

    /// `|U| × |I|` scores; column `j` is dense item `j + 1`.
    #[pyo3(signature = (dataset, phase = "test"))]
    fn scores(&self, dataset: &PyDataset, phase: &str) -> PyResult<Vec<Vec<f64>>> {
        let out = self.model.forward_all(&self.store, &dataset.inner.inputs(self::phase(phase)?)).py()?;
        Ok(rows(&out.scores().py()?))
    }

    /// Per-user, per-subband `(energy, sfm, gate)` matrices.
    #[pyo3(signature = (dataset, phase = "test"))]
    fn subbands(&self, dataset: &PyDataset, phase: &str) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let out = self.model.forward_all(&self.store, &dataset.inner.inputs(self::phase(phase)?)).py()?;
        Ok((rows(&out.energy), rows(&out.sfm), rows(&out.gates)))
    }
}

/// Undecimated wavelet packet transform of a `T × d` matrix; returns the
/// `2^level` subbands.
#[pyfunction]
#[pyo3(signature = (x, family = "haar", level = 1, padding = "periodic"))]
fn swpt(x: Vec<Vec<f64>>, family: &str, level: usize, padding: &str) -> PyResult<Vec<Vec<Vec<f64>>>> {
    let stack = wavelet::swpt(&tensor(&x)?, family.parse().py()?, level, padding.parse().py()?).py()?;
    Ok(stack.subbands.iter().map(rows).collect())
}

#[pyfunction]
fn filter_bank(family: &str) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let f = wavelet::filter_bank(family).py()?;
    Ok((f.low.to_vec(), f.high.to_vec()))
}

#[pyfunction]
fn subband_energy(z: Vec<Vec<f64>>) -> PyResult<f64> {
    wavelet::subband_energy(&tensor(&z)?).py()
}

#[pyfunction]
fn spectral_flatness(z: Vec<Vec<f64>>) -> PyResult<f64> {
    wavelet::spectral_flatness(&tensor(&z)?).py()
}

#[pyfunction]
fn power_spectrum(x: Vec<f64>) -> Vec<f64> {
    wpgrec::spectrum::power_spectrum(&x)
}

/// Chebyshev propagation over the user-item graph. `thetas[layer][k]` are
/// `d × d`; rows of `h0` are users first, then items.
#[pyfunction]
#[pyo3(signature = (edges, num_users, num_items, h0, thetas, relu = false))]
fn cheby_propagate(
    edges: Vec<(usize, usize)>,
    num_users: usize,
    num_items: usize,
    h0: Vec<Vec<f64>>,
    thetas: Vec<Vec<Vec<Vec<f64>>>>,
    relu: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let g = build_bipartite(&edges, num_users, num_items).py()?;
    let params = thetas
        .iter()
        .map(|layer| layer.iter().map(|t| tensor(t)).collect::<PyResult<Vec<_>>>())
        .collect::<PyResult<Vec<_>>>()?;
    let params = ChebyLayerParams::new(params).py()?;
    Ok(rows(&propagate(&scaled_laplacian(&g), &tensor(&h0)?, &params, relu).py()?))
}

/// 0-based rank of dense item `target` among items not in `excluded`.
/// `scores[j]` belongs to dense item `j + 1`.
#[pyfunction]
#[pyo3(signature = (scores, target, excluded = Vec::new()))]
fn rank_target(scores: Vec<f64>, target: usize, excluded: Vec<usize>) -> PyResult<usize> {
    let mut mask = vec![false; scores.len() + 1];
    mask[0] = true;
    for i in excluded {
        *mask.get_mut(i).ok_or_else(|| PyValueError::new_err(format!("excluded item {i} out of range")))? = true;
    }
    eval::rank_target(&scores, target, &mask).py()
}

/// `(HR@k, NDCG@k)` of 0-based ranks.
#[pyfunction]
fn ranking_metrics(ranks: Vec<usize>, k: usize) -> PyResult<(f64, f64)> {
    let rr: Vec<RankResult> = ranks.into_iter().enumerate().map(|(user, rank)| RankResult { user, rank }).collect();
    eval::ranking_metrics(&rr, k).py()
}

/// Worst finite-difference relative error per parameter group on the micro
/// configuration.
#[pyfunction]
#[pyo3(signature = (data_seed = 11))]
fn gradcheck(data_seed: u64) -> PyResult<HashMap<&'static str, Option<f64>>> {
    let ds = synth::micro_dataset(data_seed).py()?;
    Ok(end_to_end_check(&micro_config(), &ds, None).py()?.by_group().into_iter().collect())
}

#[pymodule]
#[pyo3(name = "wpgrec")]
fn wpgrec_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTrained>()?;
    m.add_function(wrap_pyfunction!(swpt, m)?)?;
    m.add_function(wrap_pyfunction!(filter_bank, m)?)?;
    m.add_function(wrap_pyfunction!(subband_energy, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_flatness, m)?)?;
    m.add_function(wrap_pyfunction!(power_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(cheby_propagate, m)?)?;
    m.add_function(wrap_pyfunction!(rank_target, m)?)?;
    m.add_function(wrap_pyfunction!(ranking_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
