//! Mini-batch training with early stopping on validation NDCG@10.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{Dataset, Phase};
use crate::error::{Error, Result};
use crate::eval::{rank_all, EvalOptions, MetricsReport, DEFAULT_KS};
use crate::graph::scaled_laplacian;
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamWConfig, AdamWState, ParameterStore};
use crate::tape::Tape;

/// When the summaries of users outside the batch are recomputed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SummaryRefresh {
    /// Every step, with gradients through every user's sequence stage.
    #[default]
    Step,
    /// Once per epoch, held constant for non-batch users.
    Epoch,
}

impl fmt::Display for SummaryRefresh {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Step => "step",
            Self::Epoch => "epoch",
        })
    }
}

impl FromStr for SummaryRefresh {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(Self::Step),
            "epoch" => Ok(Self::Epoch),
            other => Err(Error::Config(format!("summary_refresh '{other}' (expected step or epoch)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    /// Decoupled AdamW decay; this is the `λ2` of the objective.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub early_stopping: bool,
    pub seeds: Vec<u64>,
    pub summary_refresh: SummaryRefresh,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            weight_decay: 1e-4,
            batch_size: 128,
            max_epochs: 200,
            patience: 10,
            early_stopping: true,
            seeds: vec![42, 43, 44],
            summary_refresh: SummaryRefresh::Step,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be non-negative, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("train.weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("train.patience must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("train.seeds must list at least one seed".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean objective per training user.
    pub train_loss: f64,
    /// Mean cross-entropy per training user.
    pub train_ce: f64,
    pub valid_ndcg10: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// The run's configuration in the `key = value` format.
    pub config: String,
    pub seed: u64,
    pub dataset_digest: String,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_valid_ndcg10: f64,
    pub stopped_early: bool,
    /// `(stage, seconds)` wall-clock pairs.
    pub stage_seconds: Vec<(String, f64)>,
}

pub struct TrainOutcome {
    pub model: Model,
    /// Parameters after the best validation epoch.
    pub best: ParameterStore,
    /// Parameters after the last epoch.
    pub last: ParameterStore,
    pub manifest: RunManifest,
}

pub fn build_model(config: &ModelConfig, ds: &Dataset) -> Result<Model> {
    Model::new(config.clone(), ds.num_users(), ds.num_items(), scaled_laplacian(&ds.graph()?))
}

/// Scores all users on `phase` inputs and ranks their `phase` targets.
pub fn evaluate_model(
    model: &Model,
    store: &ParameterStore,
    ds: &Dataset,
    phase: Phase,
    ks: &[usize],
    opts: EvalOptions,
    config_digest: &str,
) -> Result<MetricsReport> {
    let out = model.forward_all(store, &ds.inputs(phase))?;
    let scores = out.scores()?;
    if !scores.is_finite() {
        return Err(Error::Numerical(format!("non-finite scores during {phase} evaluation")));
    }
    let ranks = rank_all(ds, phase, opts, |u| scores.row(u))?;
    MetricsReport::from_ranks(phase, &ranks, ks, model.config.seed, config_digest)
}

fn param_norms(store: &ParameterStore) -> String {
    store
        .iter()
        .map(|(n, t)| format!("{n}={:.4e}", t.norm()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// Runs the training loop for one seed. `model_cfg.seed` is overridden by
/// `seed`; `on_epoch` sees every epoch's log as it completes.
pub fn train(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    eval_opts: EvalOptions,
    seed: u64,
    config_text: &str,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let t_setup = Instant::now();
    let model = build_model(&ModelConfig { seed, ..model_cfg.clone() }, ds)?;
    let mut store = model.init_params()?;
    let mut opt = AdamWState::new(cfg.adamw(), &store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seqs = ds.inputs(Phase::Train);
    let targets: Vec<usize> = (0..ds.num_users()).map(|u| ds.target(u, Phase::Train)).collect();
    let digest = crate::data::dataset_digest(ds)?;
    let config_digest = crate::config::digest(config_text);
    let setup = t_setup.elapsed().as_secs_f64();

    let mut users: Vec<usize> = (0..ds.num_users()).collect();
    let mut epochs = Vec::new();
    let (mut best, mut best_epoch, mut best_ndcg) = (store.clone(), 0, f64::NEG_INFINITY);
    let mut stale = 0;
    let mut stopped_early = false;
    let (mut train_secs, mut eval_secs) = (0.0, 0.0);
    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        users.shuffle(&mut rng);
        let cache = match cfg.summary_refresh {
            SummaryRefresh::Epoch => Some(model.summaries(&store, &seqs)?),
            SummaryRefresh::Step => None,
        };
        let (mut loss_sum, mut ce_sum) = (0.0, 0.0);
        for (step, batch) in users.chunks(cfg.batch_size).enumerate() {
            let bt: Vec<usize> = batch.iter().map(|&u| targets[u]).collect();
            let mut tape = Tape::new();
            let rec = model.record_step_with(&mut tape, &store, &seqs, batch, &bt, cache.as_deref())?;
            let loss = tape.value(rec.loss).item()?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss {loss} at epoch {epoch}, step {}; parameter norms: {}",
                    step + 1,
                    param_norms(&store)
                )));
            }
            let mut grads = tape.backward(rec.loss)?;
            drop(tape);
            grads.fill_missing(&store);
            opt.step(&mut store, &grads)?;
            loss_sum += loss;
            ce_sum += rec.ce;
        }
        train_secs += t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let valid = evaluate_model(&model, &store, ds, Phase::Valid, &[10], eval_opts, &config_digest)?;
        eval_secs += t1.elapsed().as_secs_f64();
        let ndcg = valid.ndcg(10);
        let n = ds.num_users() as f64;
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / n,
            train_ce: ce_sum / n,
            valid_ndcg10: ndcg,
            seconds: t0.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        epochs.push(log);
        if ndcg > best_ndcg {
            best_ndcg = ndcg;
            best_epoch = epoch;
            best = store.clone();
            stale = 0;
        } else {
            stale += 1;
            if cfg.early_stopping && stale >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let manifest = RunManifest {
        config: config_text.to_string(),
        seed,
        dataset_digest: digest,
        epochs,
        best_epoch,
        best_valid_ndcg10: best_ndcg,
        stopped_early,
        stage_seconds: vec![("setup".into(), setup), ("train".into(), train_secs), ("validate".into(), eval_secs)],
    };
    Ok(TrainOutcome {
        model,
        best,
        last: store,
        manifest,
    })
}

/// Sidecar stored next to a checkpoint so it can be reloaded without the
/// original configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub num_users: usize,
    pub num_items: usize,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_checkpoint(path: &Path, model: &Model, store: &ParameterStore) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    checkpoint::save(path, store)?;
    let meta = CheckpointMeta {
        model: model.config.clone(),
        num_users: model.num_users,
        num_items: model.num_items,
    };
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))? + "\n";
    let side = sidecar_path(path);
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, ParameterStore)> {
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
    Ok((meta, checkpoint::load(path)?))
}

/// Rebuilds the model of a checkpoint against `ds`, checking sizes.
pub fn model_for_checkpoint(meta: &CheckpointMeta, store: &ParameterStore, ds: &Dataset) -> Result<Model> {
    if meta.num_items != ds.num_items() || meta.num_users != ds.num_users() {
        return Err(Error::Data(format!(
            "checkpoint was trained on {} users and {} items but the dataset has {} users and {} items",
            meta.num_users,
            meta.num_items,
            ds.num_users(),
            ds.num_items()
        )));
    }
    let model = build_model(&meta.model, ds)?;
    let fresh = model.init_params()?;
    for (name, t) in fresh.iter() {
        let got = store.require(name).map_err(|_| Error::Data(format!("checkpoint lacks parameter '{name}'")))?;
        if got.shape() != t.shape() {
            return Err(Error::Data(format!("parameter '{name}' has shape {:?}, expected {:?}", got.shape(), t.shape())));
        }
    }
    Ok(model)
}

/// Metrics for both phases after training.
pub fn final_reports(outcome: &TrainOutcome, ds: &Dataset, opts: EvalOptions, config_digest: &str) -> Result<Vec<MetricsReport>> {
    [Phase::Valid, Phase::Test]
        .into_iter()
        .map(|p| evaluate_model(&outcome.model, &outcome.best, ds, p, &DEFAULT_KS, opts, config_digest))
        .collect()
}
