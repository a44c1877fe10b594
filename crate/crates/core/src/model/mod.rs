//! The recommender's forward pass and training objective.
//!
//! A forward pass has two stages:
//!
//! 1. **sequence stage**, per user: embed the most recent `max_len` items,
//!    add boundary tokens, decompose into `B` subbands, and summarize every
//!    subband by attention. Descriptor gates are computed here as well.
//! 2. **graph stage**, per subband: stack the user summaries above the item
//!    embeddings, propagate over the interaction graph, then fuse subbands
//!    into one user vector (gated) and one item vector (averaged).
//!
//! Users are packed into one matrix with `max_len + 2τ` rows each, see
//! [`SeqLayout`]. Only the trailing `T_u + 2τ` rows of a user are valid.

pub mod check;
pub mod config;
pub mod ops;

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::{theta_name, ScaledLaplacian};
use crate::layout::SeqLayout;
use crate::nn::Mlp;
use crate::optim::ParameterStore;
use crate::tape::{Tape, TapeStats, Var};
use crate::tensor::Tensor;
use crate::wavelet::{swpt_on_tape, FilterPair};

pub use config::{Ablations, GateRegularizer, ModelConfig};
use ops::{
    attention_on_tape, descriptors_on_tape, gated_mix_on_tape, objective_on_tape, project_on_tape,
    uniform_mix_on_tape, AttentionVars, FusionVars,
};

pub const ITEM_EMBEDDING: &str = "item_emb";
pub const LEFT_TOKENS: &str = "boundary.left";
pub const RIGHT_TOKENS: &str = "boundary.right";
pub const FUSION_WEIGHT: &str = "fusion.w";
pub const FUSION_GAMMA: &str = "fusion.ln.gamma";
pub const FUSION_BETA: &str = "fusion.ln.beta";
const EMBEDDING_STD: f64 = 0.02;
/// Users per tape when evaluating without gradients.
const EVAL_CHUNK: usize = 256;

/// Values of one forward pass over every user.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `|U| × d`
    pub users: Tensor,
    /// `|I| × d`, row `i` is dense item `i + 1`.
    pub items: Tensor,
    /// `|U| × B`
    pub gates: Tensor,
    /// `|U| × B`
    pub energy: Tensor,
    /// `|U| × B`
    pub sfm: Tensor,
}

impl ForwardOutput {
    /// `|U| × |I|` score matrix.
    pub fn scores(&self) -> Result<Tensor> {
        self.users.matmul_t(&self.items)
    }
}

/// Scalars and handles from one recorded training step.
#[derive(Clone, Copy, Debug)]
pub struct StepRecord {
    pub loss: Var,
    pub ce: f64,
    pub gate_entropy: f64,
}

struct SequenceStage {
    /// Per subband, `n × d` summaries in packing order.
    summaries: Vec<Var>,
    /// `n_desc × B` gates for the first `n_desc` packed users.
    gates: Option<Var>,
    energy: Vec<Var>,
    sfm: Vec<Var>,
}

pub struct Model {
    pub config: ModelConfig,
    pub num_users: usize,
    pub num_items: usize,
    laplacian: ScaledLaplacian,
    filters: FilterPair,
    gate_mlp: Mlp,
}

impl Model {
    pub fn new(config: ModelConfig, num_users: usize, num_items: usize, laplacian: ScaledLaplacian) -> Result<Self> {
        config.validate()?;
        if laplacian.num_nodes() != num_users + num_items {
            return Err(Error::ShapeMismatch {
                op: "model_graph",
                lhs: vec![num_users + num_items],
                rhs: vec![laplacian.num_nodes()],
            });
        }
        let gate_mlp = Mlp::new("gate", vec![3, config.gate_hidden, 1])?;
        Ok(Self {
            filters: FilterPair::new(config.family),
            config,
            num_users,
            num_items,
            laplacian,
            gate_mlp,
        })
    }

    pub fn laplacian(&self) -> &ScaledLaplacian {
        &self.laplacian
    }

    pub fn num_subbands(&self) -> usize {
        self.config.num_subbands()
    }

    fn attention_prefix(&self, b: usize) -> String {
        if self.config.attention_per_subband {
            format!("attn.b{b}")
        } else {
            "attn".to_string()
        }
    }

    fn cheby_prefix(&self, b: usize) -> String {
        if self.config.share_theta {
            "cheby".to_string()
        } else {
            format!("cheby.b{b}")
        }
    }

    /// Fresh parameters drawn from the configured seed.
    pub fn init_params(&self) -> Result<ParameterStore> {
        let c = &self.config;
        let (d, b) = (c.d, self.num_subbands());
        let mut store = ParameterStore::new(c.seed);
        store.init_normal(ITEM_EMBEDDING, &[self.num_items + 1, d], EMBEDDING_STD)?;
        store.get_mut(ITEM_EMBEDDING).unwrap().row_mut(0).fill(0.0);
        let tau = c.effective_tau();
        if tau > 0 {
            store.init_normal(LEFT_TOKENS, &[tau, d], EMBEDDING_STD)?;
            store.init_normal(RIGHT_TOKENS, &[tau, d], EMBEDDING_STD)?;
        }
        if !c.ablations.no_attention {
            let heads = if c.attention_per_subband { b } else { 1 };
            for h in 0..heads {
                let p = self.attention_prefix(h);
                store.init_xavier(&format!("{p}.w"), d, c.attention_hidden)?;
                store.init_const(&format!("{p}.c"), &[c.attention_hidden], 0.0)?;
                store.init_xavier(&format!("{p}.v"), c.attention_hidden, 1)?;
            }
        }
        let sets = if c.share_theta { 1 } else { b };
        for s in 0..sets {
            crate::graph::init_cheby_params(&mut store, &self.cheby_prefix(s), c.effective_layers(), c.cheby_order, d)?;
        }
        if !c.ablations.no_gating {
            self.gate_mlp.init(&mut store)?;
        }
        store.init_xavier(FUSION_WEIGHT, d, d)?;
        store.init_const(FUSION_GAMMA, &[d], 1.0)?;
        store.init_const(FUSION_BETA, &[d], 0.0)?;
        Ok(store)
    }

    /// Packs the given users' sequences as `[padding][left][items][right]`
    /// blocks of `stride` rows gathered from `[E_I; left; right]`.
    fn pack(&self, tape: &mut Tape, store: &ParameterStore, seqs: &[&[usize]], order: &[usize]) -> Result<(Var, Rc<SeqLayout>)> {
        let c = &self.config;
        let tau = c.effective_tau();
        let emb = tape.param(ITEM_EMBEDDING, store.require(ITEM_EMBEDDING)?);
        let table = if tau > 0 {
            let l = tape.param(LEFT_TOKENS, store.require(LEFT_TOKENS)?);
            let r = tape.param(RIGHT_TOKENS, store.require(RIGHT_TOKENS)?);
            tape.concat_rows(&[emb, l, r])?
        } else {
            emb
        };
        let left0 = self.num_items + 1;
        let right0 = left0 + tau;
        let stride = c.stride();
        let mut index = Vec::with_capacity(order.len() * stride);
        let mut starts = Vec::with_capacity(order.len());
        for &u in order {
            let seq = seqs.get(u).ok_or_else(|| Error::IndexOutOfRange(format!("user {u}")))?;
            let recent = &seq[seq.len().saturating_sub(c.max_len)..];
            if recent.is_empty() {
                return Err(Error::Data(format!("user {u} has an empty input sequence")));
            }
            let start = c.max_len - recent.len();
            starts.push(start);
            index.extend(std::iter::repeat_n(None, start));
            index.extend((0..tau).map(|j| Some(left0 + j)));
            for &i in recent {
                if i == 0 || i > self.num_items {
                    return Err(Error::IndexOutOfRange(format!("user {u}: item {i} outside 1..={}", self.num_items)));
                }
                index.push(Some(i));
            }
            index.extend((0..tau).map(|j| Some(right0 + j)));
        }
        let x = tape.gather_rows(table, index.into())?;
        Ok((x, Rc::new(SeqLayout::new(stride, starts)?)))
    }

    /// Sequence stage for `order`. Gates and descriptors are produced for the
    /// first `n_desc` users of `order` when `descriptors` is set.
    fn sequence_stage(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        seqs: &[&[usize]],
        order: &[usize],
        n_desc: usize,
        descriptors: bool,
    ) -> Result<SequenceStage> {
        let c = &self.config;
        let level = c.effective_level();
        let (x, layout) = self.pack(tape, store, seqs, order)?;
        let leaves = swpt_on_tape(tape, x, &self.filters, level, c.padding, layout.clone())?;

        let mut summaries = Vec::with_capacity(leaves.len());
        for (b, &z) in leaves.iter().enumerate() {
            let scorer = if c.ablations.no_attention {
                None
            } else {
                let p = self.attention_prefix(b);
                let (w, cn, v) = (format!("{p}.w"), format!("{p}.c"), format!("{p}.v"));
                Some(AttentionVars {
                    w: tape.param(&w, store.require(&w)?),
                    c: tape.param(&cn, store.require(&cn)?),
                    v: tape.param(&v, store.require(&v)?),
                })
            };
            summaries.push(attention_on_tape(tape, z, &layout, scorer)?.0);
        }

        let learn_gates = !c.ablations.no_gating;
        let (mut energy, mut sfm, mut logits) = (Vec::new(), Vec::new(), Vec::new());
        if n_desc > 0 && (learn_gates || descriptors) {
            let stride = layout.stride();
            let desc_layout = if n_desc == order.len() {
                layout.clone()
            } else {
                Rc::new(SeqLayout::new(stride, (0..n_desc).map(|u| layout.start(u)).collect())?)
            };
            for &z in &leaves {
                let zb = if n_desc == order.len() { z } else { tape.slice_rows(z, 0, n_desc * stride)? };
                let (phi, e, s) = descriptors_on_tape(tape, zb, &desc_layout, level)?;
                energy.push(e);
                sfm.push(s);
                if learn_gates {
                    logits.push(self.gate_mlp.apply(tape, store, phi)?);
                }
            }
        }
        let gates = if logits.is_empty() {
            None
        } else {
            let l = tape.concat_cols(&logits)?;
            Some(tape.softmax_rows(l))
        };
        Ok(SequenceStage {
            summaries,
            gates,
            energy,
            sfm,
        })
    }

    fn fusion_vars(&self, tape: &mut Tape, store: &ParameterStore) -> Result<FusionVars> {
        Ok(FusionVars {
            w: tape.param(FUSION_WEIGHT, store.require(FUSION_WEIGHT)?),
            gamma: tape.param(FUSION_GAMMA, store.require(FUSION_GAMMA)?),
            beta: tape.param(FUSION_BETA, store.require(FUSION_BETA)?),
        })
    }

    /// Graph stage. `user_blocks[b]` holds every user's summary in user-id
    /// order. Returns fused `batch × d` users and `|I| × d` items.
    fn graph_stage(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        user_blocks: &[Var],
        batch: &[usize],
        gates: Option<Var>,
    ) -> Result<(Var, Var)> {
        let c = &self.config;
        let emb = tape.param(ITEM_EMBEDDING, store.require(ITEM_EMBEDDING)?);
        let items0 = tape.slice_rows(emb, 1, self.num_items)?;
        let batch_index: Rc<[Option<usize>]> = batch.iter().map(|&u| Some(u)).collect();
        let identity_batch = batch.len() == self.num_users && batch.iter().enumerate().all(|(i, &u)| i == u);
        let (mut hu, mut hi) = (Vec::new(), Vec::new());
        for (b, &users) in user_blocks.iter().enumerate() {
            let h0 = tape.concat_rows(&[users, items0])?;
            let prefix = self.cheby_prefix(b);
            let layers = (1..=c.effective_layers())
                .map(|l| {
                    (0..=c.cheby_order)
                        .map(|k| {
                            let name = theta_name(&prefix, l, k);
                            Ok(tape.param(&name, store.require(&name)?))
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let h = crate::graph::propagate_on_tape(tape, &self.laplacian.matrix, h0, &layers, c.graph_relu)?;
            hu.push(if identity_batch {
                tape.slice_rows(h, 0, self.num_users)?
            } else {
                tape.gather_rows(h, batch_index.clone())?
            });
            hi.push(tape.slice_rows(h, self.num_users, self.num_items)?);
        }
        let fusion = self.fusion_vars(tape, store)?;
        let user_mix = match gates {
            Some(g) => gated_mix_on_tape(tape, &hu, g)?,
            None => uniform_mix_on_tape(tape, &hu)?,
        };
        let zu = project_on_tape(tape, user_mix, fusion)?;
        let item_mix = uniform_mix_on_tape(tape, &hi)?;
        let zi = project_on_tape(tape, item_mix, fusion)?;
        Ok((zu, zi))
    }

    /// Records the objective for `batch` with every user's sequence stage on
    /// the tape. `targets` are dense item ids, one per batch user.
    pub fn record_step(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        seqs: &[&[usize]],
        batch: &[usize],
        targets: &[usize],
    ) -> Result<StepRecord> {
        self.record_step_with(tape, store, seqs, batch, targets, None)
    }

    /// As [`Model::record_step`], but non-batch users take their summaries
    /// from `cache` (one `|U| × d` tensor per subband) as constants.
    pub fn record_step_with(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        seqs: &[&[usize]],
        batch: &[usize],
        targets: &[usize],
        cache: Option<&[Tensor]>,
    ) -> Result<StepRecord> {
        if batch.len() != targets.len() || batch.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "batch of {} users with {} targets",
                batch.len(),
                targets.len()
            )));
        }
        if seqs.len() != self.num_users {
            return Err(Error::ShapeMismatch {
                op: "record_step",
                lhs: vec![self.num_users],
                rhs: vec![seqs.len()],
            });
        }
        let mut in_batch = vec![usize::MAX; self.num_users];
        for (p, &u) in batch.iter().enumerate() {
            if u >= self.num_users || in_batch[u] != usize::MAX {
                return Err(Error::InvalidArgument(format!("batch user {u} out of range or repeated")));
            }
            in_batch[u] = p;
        }
        let nb = batch.len();
        let order: Vec<usize> = match cache {
            Some(_) => batch.to_vec(),
            None => batch.iter().copied().chain((0..self.num_users).filter(|&u| in_batch[u] == usize::MAX)).collect(),
        };
        let stage = self.sequence_stage(tape, store, seqs, &order, nb, false)?;

        let mut user_blocks = Vec::with_capacity(stage.summaries.len());
        for (b, &p) in stage.summaries.iter().enumerate() {
            let block = match cache {
                Some(cached) => {
                    let cached = cached.get(b).ok_or_else(|| Error::InvalidArgument("summary cache too short".into()))?;
                    let cv = tape.constant(cached.clone());
                    let both = tape.concat_rows(&[cv, p])?;
                    let index: Rc<[Option<usize>]> = (0..self.num_users)
                        .map(|u| Some(if in_batch[u] == usize::MAX { u } else { self.num_users + in_batch[u] }))
                        .collect();
                    tape.gather_rows(both, index)?
                }
                None => {
                    let mut pos = vec![0; self.num_users];
                    for (p, &u) in order.iter().enumerate() {
                        pos[u] = p;
                    }
                    if pos.iter().enumerate().all(|(u, &p)| u == p) {
                        p
                    } else {
                        tape.gather_rows(p, pos.into_iter().map(Some).collect())?
                    }
                }
            };
            user_blocks.push(block);
        }

        let (zu, zi) = self.graph_stage(tape, store, &user_blocks, batch, stage.gates)?;
        let logits = tape.matmul_t(zu, zi)?;
        let cols: Rc<[usize]> = targets
            .iter()
            .map(|&t| {
                if t == 0 || t > self.num_items {
                    Err(Error::IndexOutOfRange(format!("target item {t} outside 1..={}", self.num_items)))
                } else {
                    Ok(t - 1)
                }
            })
            .collect::<Result<_>>()?;
        let (loss, ce, ent) =
            objective_on_tape(tape, logits, cols, stage.gates, self.config.lambda1, self.config.gate_regularizer)?;
        Ok(StepRecord {
            loss,
            ce: tape.value(ce).item()?,
            gate_entropy: ent.map(|e| tape.value(e).item()).transpose()?.unwrap_or(0.0),
        })
    }

    /// Summaries of every user (one `|U| × d` tensor per subband), computed
    /// without gradients in chunks of users.
    pub fn summaries(&self, store: &ParameterStore, seqs: &[&[usize]]) -> Result<Vec<Tensor>> {
        Ok(self.sequence_values(store, seqs, false)?.0)
    }

    /// Sequence-stage values for all users: summaries per subband plus gate,
    /// energy and flatness matrices (`|U| × B`) when `descriptors` is set.
    fn sequence_values(&self, store: &ParameterStore, seqs: &[&[usize]], descriptors: bool) -> Result<(Vec<Tensor>, [Tensor; 3])> {
        let b = self.num_subbands();
        let d = self.config.d;
        let mut summaries = vec![Vec::with_capacity(self.num_users * d); b];
        let mut desc = [Vec::new(), Vec::new(), Vec::new()];
        let users: Vec<usize> = (0..self.num_users).collect();
        for chunk in users.chunks(EVAL_CHUNK) {
            let mut tape = Tape::new();
            let stage = self.sequence_stage(&mut tape, store, seqs, chunk, chunk.len(), descriptors)?;
            for (s, &v) in summaries.iter_mut().zip(&stage.summaries) {
                s.extend_from_slice(tape.value(v).data());
            }
            if descriptors {
                let gates = match stage.gates {
                    Some(g) => tape.value(g).clone(),
                    None => Tensor::full(&[chunk.len(), b], 1.0 / b as f64),
                };
                desc[0].extend_from_slice(gates.data());
                for r in 0..chunk.len() {
                    desc[1].extend(stage.energy.iter().map(|&e| tape.value(e).data()[r]));
                    desc[2].extend(stage.sfm.iter().map(|&s| tape.value(s).data()[r]));
                }
            }
        }
        let summaries = summaries
            .into_iter()
            .map(|s| Tensor::matrix(self.num_users, d, s))
            .collect::<Result<Vec<_>>>()?;
        let rows = if descriptors { self.num_users } else { 0 };
        let [g, e, s] = desc;
        Ok((
            summaries,
            [Tensor::matrix(rows, b, g)?, Tensor::matrix(rows, b, e)?, Tensor::matrix(rows, b, s)?],
        ))
    }

    /// Fused representations of every user and item, plus gates and
    /// descriptors, without gradients.
    pub fn forward_all(&self, store: &ParameterStore, seqs: &[&[usize]]) -> Result<ForwardOutput> {
        Ok(self.forward_all_with_stats(store, seqs)?.0)
    }

    /// [`Model::forward_all`] plus the work counters of the graph stage.
    pub fn forward_all_with_stats(&self, store: &ParameterStore, seqs: &[&[usize]]) -> Result<(ForwardOutput, TapeStats)> {
        if seqs.len() != self.num_users {
            return Err(Error::ShapeMismatch {
                op: "forward_all",
                lhs: vec![self.num_users],
                rhs: vec![seqs.len()],
            });
        }
        let (summaries, [gates, energy, sfm]) = self.sequence_values(store, seqs, true)?;
        let mut tape = Tape::new();
        let blocks: Vec<Var> = summaries.into_iter().map(|s| tape.constant(s)).collect();
        let g = (!self.config.ablations.no_gating).then(|| tape.constant(gates.clone()));
        let all: Vec<usize> = (0..self.num_users).collect();
        let (zu, zi) = self.graph_stage(&mut tape, store, &blocks, &all, g)?;
        let stats = tape.stats().clone();
        Ok((
            ForwardOutput {
                users: tape.value(zu).clone(),
                items: tape.value(zi).clone(),
                gates,
                energy,
                sfm,
            },
            stats,
        ))
    }
}
