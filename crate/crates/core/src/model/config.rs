use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wavelet::{PaddingMode, WaveletFamily};

/// Component switches for the ablation variants.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablations {
    /// Identity in place of the packet transform (`ℓ = 0`).
    pub no_wavelet: bool,
    /// Skip graph propagation (`L_g = 0`).
    pub no_gnn: bool,
    /// Uniform averaging in place of descriptor gates.
    pub no_gating: bool,
    /// Mean pooling over valid positions in place of additive attention.
    pub no_attention: bool,
    /// No boundary tokens (`τ = 0`).
    pub no_boundary: bool,
}

impl Ablations {
    pub const VARIANTS: [&'static str; 5] = ["no_wavelet", "no_gnn", "no_gating", "no_attention", "no_boundary"];

    /// The variant with exactly one component removed.
    pub fn only(name: &str) -> Result<Self> {
        let mut a = Self::default();
        a.set(name, true)?;
        Ok(a)
    }

    pub fn set(&mut self, name: &str, value: bool) -> Result<()> {
        let slot = match name {
            "no_wavelet" => &mut self.no_wavelet,
            "no_gnn" => &mut self.no_gnn,
            "no_gating" => &mut self.no_gating,
            "no_attention" => &mut self.no_attention,
            "no_boundary" => &mut self.no_boundary,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation '{other}' (expected one of {})",
                    Self::VARIANTS.join(", ")
                )))
            }
        };
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<bool> {
        match name {
            "no_wavelet" => Some(self.no_wavelet),
            "no_gnn" => Some(self.no_gnn),
            "no_gating" => Some(self.no_gating),
            "no_attention" => Some(self.no_attention),
            "no_boundary" => Some(self.no_boundary),
            _ => None,
        }
    }
}

/// Sign of the gate-entropy regularizer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateRegularizer {
    /// `+λ1 · H(g)`: penalize entropy, pushing gates toward one subband.
    #[default]
    Concentrate,
    /// `−λ1 · H(g)`: reward entropy, pushing gates toward uniform.
    Spread,
}

impl GateRegularizer {
    pub fn sign(self) -> f64 {
        match self {
            Self::Concentrate => 1.0,
            Self::Spread => -1.0,
        }
    }
}

impl fmt::Display for GateRegularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Concentrate => "concentrate",
            Self::Spread => "spread",
        })
    }
}

impl FromStr for GateRegularizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concentrate" => Ok(Self::Concentrate),
            "spread" => Ok(Self::Spread),
            other => Err(Error::Config(format!("gate regularizer '{other}' (expected concentrate or spread)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub family: WaveletFamily,
    pub level: usize,
    pub tau: usize,
    pub padding: PaddingMode,
    /// Chebyshev order `K`.
    pub cheby_order: usize,
    /// Propagation depth `L_g`.
    pub graph_layers: usize,
    /// ReLU between propagation layers.
    pub graph_relu: bool,
    /// One `Θ` set for all subbands instead of one per subband.
    pub share_theta: bool,
    pub attention_hidden: usize,
    /// One attention scorer per subband instead of a shared one.
    pub attention_per_subband: bool,
    pub gate_hidden: usize,
    pub lambda1: f64,
    pub gate_regularizer: GateRegularizer,
    pub max_len: usize,
    pub ablations: Ablations,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            family: WaveletFamily::Sym4,
            level: 2,
            tau: 2,
            padding: PaddingMode::Symmetric,
            cheby_order: 2,
            graph_layers: 2,
            graph_relu: false,
            share_theta: false,
            attention_hidden: 32,
            attention_per_subband: false,
            gate_hidden: 16,
            lambda1: 1e-5,
            gate_regularizer: GateRegularizer::Concentrate,
            max_len: 50,
            ablations: Ablations::default(),
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("max_len", self.max_len),
            ("attention_hidden", self.attention_hidden),
            ("gate_hidden", self.gate_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.lambda1.is_finite() {
            return Err(Error::Config("lambda1 must be finite".into()));
        }
        Ok(())
    }

    /// Decomposition depth after ablations.
    pub fn effective_level(&self) -> usize {
        if self.ablations.no_wavelet {
            0
        } else {
            self.level
        }
    }

    pub fn effective_tau(&self) -> usize {
        if self.ablations.no_boundary {
            0
        } else {
            self.tau
        }
    }

    pub fn effective_layers(&self) -> usize {
        if self.ablations.no_gnn {
            0
        } else {
            self.graph_layers
        }
    }

    pub fn num_subbands(&self) -> usize {
        1 << self.effective_level()
    }

    /// Rows per packed sequence: `max_len + 2τ`.
    pub fn stride(&self) -> usize {
        self.max_len + 2 * self.effective_tau()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablations_toggle_effective_sizes() {
        let mut c = ModelConfig::default();
        assert_eq!((c.effective_level(), c.effective_tau(), c.effective_layers()), (2, 2, 2));
        assert_eq!(c.stride(), 54);
        c.ablations = Ablations::only("no_wavelet").unwrap();
        assert_eq!(c.num_subbands(), 1);
        c.ablations = Ablations::only("no_boundary").unwrap();
        assert_eq!(c.stride(), 50);
        c.ablations = Ablations::only("no_gnn").unwrap();
        assert_eq!(c.effective_layers(), 0);
        assert!(Ablations::only("no_everything").is_err());
    }

    #[test]
    fn json_roundtrip() {
        let c = ModelConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
    }
}
