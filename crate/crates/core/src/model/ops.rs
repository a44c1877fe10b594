//! The model's building blocks. Each `*_on_tape` function records one stage
//! of the forward pass; the plain functions wrap them for single-user use.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::layout::SeqLayout;
use crate::nn::{mlp_apply, softmax, AffineLayer};
use crate::tape::{Tape, Var, LOG_EPS};
use crate::tensor::{dot, Tensor};

use super::config::GateRegularizer;

/// Additive attention scorer `v · tanh(z W + c)`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w: Var,
    pub c: Var,
    pub v: Var,
}

/// Attention summary of every sequence in `layout`. With no scorer the
/// weights are uniform over valid rows.
pub fn attention_on_tape(
    tape: &mut Tape,
    z: Var,
    layout: &Rc<SeqLayout>,
    scorer: Option<AttentionVars>,
) -> Result<(Var, Var)> {
    let scores = match scorer {
        Some(a) => {
            let h = tape.matmul(z, a.w)?;
            let h = tape.add_row(h, a.c)?;
            let h = tape.tanh(h);
            tape.matmul(h, a.v)?
        }
        None => tape.constant(Tensor::zeros(&[layout.total_rows(), 1])),
    };
    let weights = tape.segment_softmax(scores, layout.clone())?;
    let summary = tape.segment_weighted_sum(weights, z, layout.clone())?;
    Ok((summary, weights))
}

/// Per-sequence descriptor rows `[ln(1 + E), SFM, ℓ]` plus the raw energy
/// and flatness columns.
pub fn descriptors_on_tape(tape: &mut Tape, z: Var, layout: &Rc<SeqLayout>, level: usize) -> Result<(Var, Var, Var)> {
    let energy = tape.segment_energy(z, layout.clone())?;
    let sfm = tape.segment_flatness(z, layout.clone())?;
    let log_e = tape.ln1p(energy);
    let lvl = tape.constant(Tensor::full(&[layout.num_seqs(), 1], level as f64));
    let phi = tape.concat_cols(&[log_e, sfm, lvl])?;
    Ok((phi, energy, sfm))
}

/// `(1/B) Σ_b h_b`.
pub fn uniform_mix_on_tape(tape: &mut Tape, hs: &[Var]) -> Result<Var> {
    let sum = tape.add_n(hs)?;
    Ok(tape.scale(sum, 1.0 / hs.len() as f64))
}

/// `Σ_b g[:, b] ⊙ h_b` with `g` holding one column per subband.
pub fn gated_mix_on_tape(tape: &mut Tape, hs: &[Var], g: Var) -> Result<Var> {
    let parts = hs
        .iter()
        .enumerate()
        .map(|(b, &h)| {
            let col = tape.column(g, b)?;
            tape.scale_rows(h, col)
        })
        .collect::<Result<Vec<_>>>()?;
    tape.add_n(&parts)
}

/// `LN(x W_f)`.
pub fn project_on_tape(tape: &mut Tape, x: Var, fusion: FusionVars) -> Result<Var> {
    let y = tape.matmul(x, fusion.w)?;
    tape.layer_norm(y, fusion.gamma, fusion.beta)
}

#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub w: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Summed cross-entropy over rows plus the signed, scaled gate entropy.
pub fn objective_on_tape(
    tape: &mut Tape,
    logits: Var,
    targets: Rc<[usize]>,
    gates: Option<Var>,
    lambda1: f64,
    regularizer: GateRegularizer,
) -> Result<(Var, Var, Option<Var>)> {
    let ce = tape.softmax_cross_entropy(logits, targets)?;
    match gates {
        Some(g) if lambda1 != 0.0 => {
            let ent = tape.mean_row_entropy(g);
            let reg = tape.scale(ent, lambda1 * regularizer.sign());
            Ok((tape.add(ce, reg)?, ce, Some(ent)))
        }
        Some(g) => {
            let ent = tape.mean_row_entropy(g);
            Ok((ce, ce, Some(ent)))
        }
        None => Ok((ce, ce, None)),
    }
}

/// Rows `E_I[i_t]`, with masked positions forced to zero.
pub fn embed_sequence(items: &[usize], mask: &[bool], table: &Tensor) -> Result<Tensor> {
    if items.len() != mask.len() {
        return Err(Error::ShapeMismatch {
            op: "embed_sequence",
            lhs: vec![items.len()],
            rhs: vec![mask.len()],
        });
    }
    if let Some(&i) = items.iter().find(|&&i| i >= table.rows()) {
        return Err(Error::IndexOutOfRange(format!("item {i} with {} embedding rows", table.rows())));
    }
    let index: Rc<[Option<usize>]> = items.iter().zip(mask).map(|(&i, &m)| m.then_some(i)).collect();
    let mut tape = Tape::new();
    let t = tape.constant(table.clone());
    let x = tape.gather_rows(t, index)?;
    Ok(tape.value(x).clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    /// `d × h`
    pub w: Tensor,
    /// `h`
    pub c: Tensor,
    /// `h × 1`
    pub v: Tensor,
}

/// Attention summary of the rows of `z` selected by `mask`.
pub fn subband_attention(z: &Tensor, mask: &[bool], params: &AttentionParams) -> Result<Tensor> {
    let valid: Vec<Option<usize>> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(t, _)| Some(t)).collect();
    if valid.is_empty() {
        return Err(Error::InvalidArgument("attention over a fully masked sequence".into()));
    }
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let compact = tape.gather_rows(zv, valid.into())?;
    let layout = Rc::new(SeqLayout::single(tape.value(compact).rows()));
    let scorer = AttentionVars {
        w: tape.constant(params.w.clone()),
        c: tape.constant(params.c.clone()),
        v: tape.constant(params.v.clone()),
    };
    let (p, _) = attention_on_tape(&mut tape, compact, &layout, Some(scorer))?;
    Ok(Tensor::vector(tape.value(p).data().to_vec()))
}

/// `[ln(1 + energy), sfm, level]`.
pub fn build_descriptors(energy: f64, sfm: f64, level: usize) -> [f64; 3] {
    [energy.ln_1p(), sfm, level as f64]
}

/// Softmax over subbands of the gate MLP's scalar output per descriptor row.
pub fn gate_weights(phi: &Tensor, mlp: &[AffineLayer], uniform: bool) -> Result<Vec<f64>> {
    let b = phi.rows();
    if b == 0 {
        return Err(Error::InvalidArgument("gate over zero subbands".into()));
    }
    if uniform {
        return Ok(vec![1.0 / b as f64; b]);
    }
    let logits = mlp_apply(mlp, phi)?;
    if logits.cols() != 1 {
        return Err(Error::ShapeMismatch {
            op: "gate_weights",
            lhs: logits.shape().to_vec(),
            rhs: vec![b, 1],
        });
    }
    Ok(softmax(&Tensor::vector(logits.into_data()), 0)?.into_data())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub w: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

fn with_fusion<T>(params: &FusionParams, f: impl FnOnce(&mut Tape, FusionVars) -> Result<T>) -> Result<T> {
    let mut tape = Tape::new();
    let vars = FusionVars {
        w: tape.constant(params.w.clone()),
        gamma: tape.constant(params.gamma.clone()),
        beta: tape.constant(params.beta.clone()),
    };
    f(&mut tape, vars)
}

fn subband_rows(tape: &mut Tape, h: &Tensor) -> Vec<Var> {
    (0..h.rows())
        .map(|b| tape.constant(Tensor::matrix(1, h.cols(), h.row(b).to_vec()).unwrap()))
        .collect()
}

/// `LN(W_f Σ_b g_b h_b)` for one user; `h` is `B × d`.
pub fn fuse_user(g: &[f64], h: &Tensor, params: &FusionParams) -> Result<Tensor> {
    if g.len() != h.rows() {
        return Err(Error::ShapeMismatch {
            op: "fuse_user",
            lhs: vec![g.len()],
            rhs: h.shape().to_vec(),
        });
    }
    with_fusion(params, |tape, fv| {
        let hs = subband_rows(tape, h);
        let gv = tape.constant(Tensor::matrix(1, g.len(), g.to_vec())?);
        let mixed = gated_mix_on_tape(tape, &hs, gv)?;
        let z = project_on_tape(tape, mixed, fv)?;
        Ok(Tensor::vector(tape.value(z).data().to_vec()))
    })
}

/// `LN(W_f (1/B) Σ_b h_b)` for one item; `h` is `B × d`.
pub fn fuse_item(h: &Tensor, params: &FusionParams) -> Result<Tensor> {
    if h.rows() == 0 {
        return Err(Error::InvalidArgument("fuse_item over zero subbands".into()));
    }
    with_fusion(params, |tape, fv| {
        let hs = subband_rows(tape, h);
        let mixed = uniform_mix_on_tape(tape, &hs)?;
        let z = project_on_tape(tape, mixed, fv)?;
        Ok(Tensor::vector(tape.value(z).data().to_vec()))
    })
}

pub fn score(user: &[f64], item: &[f64]) -> f64 {
    dot(user, item)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    /// Cross-entropy summed over the batch.
    pub ce: f64,
    /// Mean gate entropy over the batch (0 when gates are not learned).
    pub gate_entropy: f64,
    pub total: f64,
}

/// Objective for rows of candidate scores. `targets` are column indices.
pub fn full_softmax_loss(
    scores: &Tensor,
    targets: &[usize],
    gates: Option<&Tensor>,
    lambda1: f64,
    regularizer: GateRegularizer,
) -> Result<LossParts> {
    if let Some(&t) = targets.iter().find(|&&t| t >= scores.cols()) {
        return Err(Error::IndexOutOfRange(format!("target {t} with {} candidates", scores.cols())));
    }
    let mut tape = Tape::new();
    let s = tape.constant(scores.clone());
    let g = gates.map(|g| tape.constant(g.clone()));
    let (total, ce, ent) = objective_on_tape(&mut tape, s, targets.into(), g, lambda1, regularizer)?;
    Ok(LossParts {
        ce: tape.value(ce).item()?,
        gate_entropy: ent.map(|e| tape.value(e).item()).transpose()?.unwrap_or(0.0),
        total: tape.value(total).item()?,
    })
}

/// Mean over rows of `−Σ g ln(g + ε)`, tape-free.
pub fn gate_entropy(g: &Tensor) -> f64 {
    let rows = g.rows().max(1);
    (0..g.rows())
        .map(|r| -g.row(r).iter().map(|&p| p * (p + LOG_EPS).ln()).sum::<f64>())
        .sum::<f64>()
        / rows as f64
}
