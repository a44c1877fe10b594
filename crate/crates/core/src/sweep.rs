//! Repeated training runs over one configuration key or over the ablation
//! variants, averaged across seeds.

use std::fmt::Write as _;

use crate::config::Config;
use crate::data::{Dataset, Phase};
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::model::Ablations;
use crate::train::{evaluate_model, train};

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub label: String,
    pub seed: u64,
    pub test: MetricsReport,
    pub best_epoch: usize,
    pub valid_ndcg10: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub hr10: f64,
    pub ndcg10: f64,
    /// Mean best validation NDCG@10, the model-selection criterion.
    pub valid_ndcg10: f64,
    pub runs: Vec<RunResult>,
}

/// Trains `cfg` once per seed and reports test metrics of the best epoch.
pub fn run_seeds(ds: &Dataset, cfg: &Config, label: &str, seeds: &[u64], mut log: impl FnMut(&RunResult)) -> Result<SweepRow> {
    let text = cfg.to_text();
    let digest = crate::config::digest(&text);
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let out = train(ds, &cfg.model, &cfg.train, cfg.eval, seed, &text, |_| {})?;
        let test = evaluate_model(&out.model, &out.best, ds, Phase::Test, &[10, 20], cfg.eval, &digest)?;
        let r = RunResult {
            label: label.to_string(),
            seed,
            test,
            best_epoch: out.manifest.best_epoch,
            valid_ndcg10: out.manifest.best_valid_ndcg10,
        };
        log(&r);
        runs.push(r);
    }
    let n = runs.len() as f64;
    Ok(SweepRow {
        value: label.to_string(),
        hr10: runs.iter().map(|r| r.test.hr(10)).sum::<f64>() / n,
        ndcg10: runs.iter().map(|r| r.test.ndcg(10)).sum::<f64>() / n,
        valid_ndcg10: runs.iter().map(|r| r.valid_ndcg10).sum::<f64>() / n,
        runs,
    })
}

/// One row per value of `key`.
pub fn sweep_param(
    ds: &Dataset,
    base: &Config,
    key: &str,
    values: &[String],
    seeds: &[u64],
    mut log: impl FnMut(&RunResult),
) -> Result<Vec<SweepRow>> {
    values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            cfg.set(key, v)?;
            cfg.validate()?;
            run_seeds(ds, &cfg, v, seeds, &mut log)
        })
        .collect()
}

/// The full model followed by each single-component ablation.
pub fn sweep_ablations(ds: &Dataset, base: &Config, seeds: &[u64], mut log: impl FnMut(&RunResult)) -> Result<Vec<SweepRow>> {
    let mut full = base.clone();
    full.model.ablations = Ablations::default();
    let mut rows = vec![run_seeds(ds, &full, "full", seeds, &mut log)?];
    for name in Ablations::VARIANTS {
        rows.push(run_seeds(ds, &base.with_ablation(name)?, name, seeds, &mut log)?);
    }
    Ok(rows)
}

/// Parses a grid file: one `key = v1, v2, ...` line per searched key.
pub fn parse_grid(text: &str) -> Result<Vec<(String, Vec<String>)>> {
    let mut axes = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid line {}: expected 'key = v1, v2, ...'", n + 1)))?;
        let values: Vec<String> = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("grid line {}: no values for '{}'", n + 1, k.trim())));
        }
        axes.push((k.trim().to_string(), values));
    }
    Ok(axes)
}

/// Every combination of the grid axes as a configuration, labelled
/// `key=value` pairs separated by spaces. Invalid combinations are errors.
pub fn grid_configs(base: &Config, axes: &[(String, Vec<String>)]) -> Result<Vec<(String, Config)>> {
    let mut out = vec![(String::new(), base.clone())];
    for (key, values) in axes {
        let mut next = Vec::with_capacity(out.len() * values.len());
        for (label, cfg) in &out {
            for v in values {
                let mut c = cfg.clone();
                c.set(key, v)?;
                let sep = if label.is_empty() { "" } else { " " };
                next.push((format!("{label}{sep}{key}={v}"), c));
            }
        }
        out = next;
    }
    for (_, c) in &out {
        c.validate()?;
    }
    Ok(out)
}

/// One row per grid combination.
pub fn sweep_grid(
    ds: &Dataset,
    base: &Config,
    axes: &[(String, Vec<String>)],
    seeds: &[u64],
    mut log: impl FnMut(&RunResult),
) -> Result<Vec<SweepRow>> {
    grid_configs(base, axes)?
        .iter()
        .map(|(label, cfg)| run_seeds(ds, cfg, label, seeds, &mut log))
        .collect()
}

/// The row with the highest mean validation NDCG@10; ties keep the first.
pub fn best_by_validation(rows: &[SweepRow]) -> Option<&SweepRow> {
    rows.iter().fold(None, |best: Option<&SweepRow>, r| match best {
        Some(b) if b.valid_ndcg10 >= r.valid_ndcg10 => Some(b),
        _ => Some(r),
    })
}

/// Tab-separated `value  HR@10  NDCG@10` table with a header line.
pub fn format_table(rows: &[SweepRow]) -> String {
    let mut out = String::from("value\tHR@10\tNDCG@10\n");
    for r in rows {
        writeln!(out, "{}\t{:.6}\t{:.6}", r.value, r.hr10, r.ndcg10).unwrap();
    }
    out
}
