//! Central finite-difference verification of tape gradients.
//!
//! The error reported for a parameter tensor is
//! `max_j |a_j − n_j| / max(‖a‖∞, ‖n‖∞, floor)`, the worst entry-wise
//! deviation scaled by the tensor's gradient magnitude. The floor keeps
//! gradients that are zero by construction (a bias shared by every softmax
//! logit, say) from dividing round-off by round-off. Perturbations use
//! `h = 1e-6 · max(1, |w_j|)`.

use crate::error::Result;
use crate::optim::ParameterStore;
use crate::tape::Gradients;

/// Worst relative error for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub rel_error: f64,
    pub max_abs_analytic: f64,
    pub entries: usize,
}

pub const FD_STEP: f64 = 1e-6;
/// Smallest gradient magnitude used as the relative-error denominator.
pub const SCALE_FLOOR: f64 = 1e-4;

/// Compares `analytic` against central differences of `loss` for every
/// parameter accepted by `filter`.
pub fn check_gradients(
    store: &ParameterStore,
    analytic: &Gradients,
    mut loss: impl FnMut(&ParameterStore) -> Result<f64>,
    filter: impl Fn(&str) -> bool,
) -> Result<Vec<ParamCheck>> {
    let mut probe = store.clone();
    let mut out = Vec::new();
    let names: Vec<String> = store.names().filter(|n| filter(n)).map(str::to_string).collect();
    for name in names {
        let n = store.require(&name)?.len();
        let zeros = crate::tensor::Tensor::zeros(store.require(&name)?.shape());
        let a = analytic.get(&name).unwrap_or(&zeros).data().to_vec();
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let w = store.require(&name)?.data()[j];
            let h = FD_STEP * w.abs().max(1.0);
            probe.get_mut(&name).unwrap().data_mut()[j] = w + h;
            let up = loss(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[j] = w - h;
            let down = loss(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[j] = w;
            numeric[j] = (up - down) / (2.0 * h);
        }
        out.push(compare(&name, &a, &numeric));
    }
    Ok(out)
}

pub fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> ParamCheck {
    let max_a = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let max_n = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = max_a.max(max_n).max(SCALE_FLOOR);
    let worst = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let rel_error = worst / scale;
    ParamCheck {
        name: name.to_string(),
        rel_error,
        max_abs_analytic: max_a,
        entries: analytic.len(),
    }
}
