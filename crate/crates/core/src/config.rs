//! Run configuration as flat `key = value` text with dotted section keys.
//!
//! ```text
//! # comments start with '#'
//! wavelet.level = 2
//! train.lr = 0.005
//! train.seeds = 42,43,44
//! ```
//!
//! Values are applied in file order, so a later line overrides an earlier
//! one. Command-line flags are applied after the file.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::model::{Ablations, ModelConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{value}'"))),
    }
}

impl Config {
    /// Every key accepted by [`Config::set`], in serialization order.
    pub const KEYS: [&'static str; 29] = [
        "model.d",
        "model.attention_hidden",
        "model.attention_per_subband",
        "model.gate_hidden",
        "model.lambda1",
        "model.gate_regularizer",
        "model.max_len",
        "wavelet.family",
        "wavelet.level",
        "wavelet.tau",
        "wavelet.padding",
        "graph.K",
        "graph.layers",
        "graph.relu",
        "graph.share_theta",
        "ablation.no_wavelet",
        "ablation.no_gnn",
        "ablation.no_gating",
        "ablation.no_attention",
        "ablation.no_boundary",
        "train.lr",
        "train.weight_decay",
        "train.batch_size",
        "train.max_epochs",
        "train.patience",
        "train.early_stopping",
        "train.seeds",
        "train.summary_refresh",
        "eval.exclude_valid_at_test",
    ];

    /// Sets one key. `model.lambda2` is accepted as another name for
    /// `train.weight_decay`, and `train.lambda1` for `model.lambda1`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let (m, t) = (&mut self.model, &mut self.train);
        match key {
            "model.d" => m.d = parse(key, v)?,
            "model.attention_hidden" => m.attention_hidden = parse(key, v)?,
            "model.attention_per_subband" => m.attention_per_subband = parse_bool(key, v)?,
            "model.gate_hidden" => m.gate_hidden = parse(key, v)?,
            "model.lambda1" | "train.lambda1" => m.lambda1 = parse(key, v)?,
            "model.gate_regularizer" => m.gate_regularizer = v.parse()?,
            "model.max_len" => m.max_len = parse(key, v)?,
            "wavelet.family" => m.family = v.parse()?,
            "wavelet.level" => m.level = parse(key, v)?,
            "wavelet.tau" => m.tau = parse(key, v)?,
            "wavelet.padding" => m.padding = v.parse()?,
            "graph.K" => m.cheby_order = parse(key, v)?,
            "graph.layers" => m.graph_layers = parse(key, v)?,
            "graph.relu" => m.graph_relu = parse_bool(key, v)?,
            "graph.share_theta" => m.share_theta = parse_bool(key, v)?,
            "train.lr" => t.lr = parse(key, v)?,
            "train.weight_decay" | "model.lambda2" => t.weight_decay = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.max_epochs" => t.max_epochs = parse(key, v)?,
            "train.patience" => t.patience = parse(key, v)?,
            "train.early_stopping" => t.early_stopping = parse_bool(key, v)?,
            "train.seeds" => {
                t.seeds = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<Vec<u64>>>()?
            }
            "train.summary_refresh" => t.summary_refresh = v.parse()?,
            "eval.exclude_valid_at_test" => self.eval.exclude_valid_at_test = parse_bool(key, v)?,
            _ => match key.strip_prefix("ablation.") {
                Some(name) => m.ablations.set(name, parse_bool(key, v)?)?,
                None => return Err(Error::Config(format!("unknown key '{key}'"))),
            },
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        let (m, t) = (&self.model, &self.train);
        Ok(match key {
            "model.d" => m.d.to_string(),
            "model.attention_hidden" => m.attention_hidden.to_string(),
            "model.attention_per_subband" => m.attention_per_subband.to_string(),
            "model.gate_hidden" => m.gate_hidden.to_string(),
            "model.lambda1" => m.lambda1.to_string(),
            "model.gate_regularizer" => m.gate_regularizer.to_string(),
            "model.max_len" => m.max_len.to_string(),
            "wavelet.family" => m.family.to_string(),
            "wavelet.level" => m.level.to_string(),
            "wavelet.tau" => m.tau.to_string(),
            "wavelet.padding" => m.padding.to_string(),
            "graph.K" => m.cheby_order.to_string(),
            "graph.layers" => m.graph_layers.to_string(),
            "graph.relu" => m.graph_relu.to_string(),
            "graph.share_theta" => m.share_theta.to_string(),
            "train.lr" => t.lr.to_string(),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.max_epochs" => t.max_epochs.to_string(),
            "train.patience" => t.patience.to_string(),
            "train.early_stopping" => t.early_stopping.to_string(),
            "train.seeds" => t.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
            "train.summary_refresh" => t.summary_refresh.to_string(),
            "eval.exclude_valid_at_test" => self.eval.exclude_valid_at_test.to_string(),
            _ => match key.strip_prefix("ablation.").and_then(|n| m.ablations.get(n)) {
                Some(b) => b.to_string(),
                None => return Err(Error::Config(format!("unknown key '{key}'"))),
            },
        })
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies the assignments in `text` on top of `self`.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config error: "))))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Canonical text: every key in [`Config::KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in Self::KEYS {
            writeln!(out, "{key} = {}", self.get(key).expect("listed key")).unwrap();
        }
        out
    }

    /// The same configuration with one ablation switched on.
    pub fn with_ablation(&self, name: &str) -> Result<Self> {
        let mut c = self.clone();
        c.model.ablations = Ablations::default();
        c.model.ablations.set(name, true)?;
        Ok(c)
    }
}

/// SHA-256 hex digest of a configuration's canonical text.
pub fn digest(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_aliases() {
        let mut c = Config::default();
        c.set("wavelet.level", "3").unwrap();
        c.set("model.lambda1", "1e-7").unwrap();
        c.set("model.lambda2", "0.25").unwrap();
        c.set("train.seeds", "1, 2").unwrap();
        c.set("ablation.no_gnn", "true").unwrap();
        let text = c.to_text();
        let back = Config::parse_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
        assert_eq!(back.train.weight_decay, 0.25);
        assert_eq!(Config::parse_str("").unwrap(), Config::default());
    }

    #[test]
    fn shipped_default_file_matches_the_defaults() {
        let shipped = include_str!("../../../configs/default.conf");
        assert_eq!(shipped, Config::default().to_text());
    }

    #[test]
    fn errors_name_the_line() {
        let e = Config::parse_str("train.lr = 0.1\nbogus.key = 3\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("bogus.key"), "{e}");
        assert!(Config::parse_str("train.lr = -1").is_err());
        assert!(Config::parse_str("train.lr").is_err());
    }
}
