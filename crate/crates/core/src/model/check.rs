//! End-to-end finite-difference check of the training objective.

use crate::data::{Dataset, Phase};
use crate::error::Result;
use crate::gradcheck::{check_gradients, ParamCheck};
use crate::graph::scaled_laplacian;
use crate::optim::ParameterStore;
use crate::tape::{Gradients, Tape};

use super::{Model, ModelConfig};

/// Gradient check tolerance on the worst relative error.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Parameter groups in report order.
pub const PARAM_GROUPS: [&str; 6] = ["item_emb", "boundary", "attn", "cheby", "gate", "fusion"];

pub fn param_group(name: &str) -> &str {
    PARAM_GROUPS
        .iter()
        .find(|g| name == **g || name.starts_with(&format!("{g}.")))
        .copied()
        .unwrap_or(name)
}

/// `d = 4`, `ℓ = 1`, `τ = 2`, `K = 2`, `L_g = 1`, six-item inputs. The gate
/// term is weighted heavily enough to show up in the check.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        d: 4,
        level: 1,
        tau: 2,
        cheby_order: 2,
        graph_layers: 1,
        attention_hidden: 3,
        gate_hidden: 3,
        lambda1: 0.1,
        max_len: 6,
        ..ModelConfig::default()
    }
}

/// Result of [`end_to_end_check`].
#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub loss: f64,
}

impl GradcheckReport {
    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    /// Worst error per group, `None` for groups without parameters.
    pub fn by_group(&self) -> Vec<(&'static str, Option<f64>)> {
        PARAM_GROUPS
            .iter()
            .map(|&g| {
                let errs: Vec<f64> = self.params.iter().filter(|p| param_group(&p.name) == g).map(|p| p.rel_error).collect();
                (g, (!errs.is_empty()).then(|| errs.iter().copied().fold(0.0, f64::max)))
            })
            .collect()
    }

    pub fn failures(&self, tol: f64) -> Vec<&str> {
        self.params.iter().filter(|p| !(p.rel_error < tol)).map(|p| p.name.as_str()).collect()
    }
}

/// Checks every parameter's gradient of the full objective with all users
/// in one batch against their train targets. `corrupt` names a parameter
/// whose analytic gradient is perturbed first, as a negative control.
pub fn end_to_end_check(config: &ModelConfig, ds: &Dataset, corrupt: Option<&str>) -> Result<GradcheckReport> {
    let lap = scaled_laplacian(&ds.graph()?);
    let model = Model::new(config.clone(), ds.num_users(), ds.num_items(), lap)?;
    let store = model.init_params()?;
    let seqs = ds.inputs(Phase::Train);
    let batch: Vec<usize> = (0..ds.num_users()).collect();
    let targets: Vec<usize> = batch.iter().map(|&u| ds.target(u, Phase::Train)).collect();

    let loss_of = |s: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::new();
        let rec = model.record_step(&mut tape, s, &seqs, &batch, &targets)?;
        tape.value(rec.loss).item()
    };
    let mut tape = Tape::new();
    let rec = model.record_step(&mut tape, &store, &seqs, &batch, &targets)?;
    let loss = tape.value(rec.loss).item()?;
    let mut grads: Gradients = tape.backward(rec.loss)?;
    grads.fill_missing(&store);
    if let Some(name) = corrupt {
        if let Some(g) = grads.get_mut(name) {
            for v in g.data_mut() {
                *v = 2.0 * *v + 1e-2;
            }
        }
    }
    let params = check_gradients(&store, &grads, loss_of, |_| true)?;
    Ok(GradcheckReport { params, loss })
}
