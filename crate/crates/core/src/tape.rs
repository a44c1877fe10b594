//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] is an append-only list of nodes. Every op computes its value
//! eagerly and records what backward needs. Because nodes only reference
//! earlier nodes, walking the list backwards is a valid reverse topological
//! order, and gradients from fan-out simply accumulate.

use std::rc::Rc;

use indexmap::IndexMap;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::layout::SeqLayout;
use crate::sparse::CsrMatrix;
use crate::spectrum::complex_spectrum;
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};
use crate::wavelet::transform::{dilated_conv_backward, dilated_conv_forward, PaddingMode};

/// Offset added inside logarithms of spectral bins and gate weights.
pub const LOG_EPS: f64 = 1e-12;
/// Variance offset inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Tanh(Var),
    Relu(Var),
    Ln1p(Var),
    Sum(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows {
        table: Var,
        index: Rc<[Option<usize>]>,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ScaleRows {
        x: Var,
        w: Var,
    },
    SpMM {
        mat: Rc<CsrMatrix>,
        x: Var,
    },
    DilatedConv {
        x: Var,
        filter: Rc<[f64]>,
        dilation: usize,
        mode: PaddingMode,
        layout: Rc<SeqLayout>,
    },
    SegmentEnergy {
        x: Var,
        layout: Rc<SeqLayout>,
    },
    SegmentFlatness {
        x: Var,
        layout: Rc<SeqLayout>,
        spectra: Vec<Complex64>,
        flat: Vec<f64>,
        mean_power: Vec<f64>,
    },
    SegmentSoftmax {
        scores: Var,
        layout: Rc<SeqLayout>,
    },
    SegmentWeightedSum {
        w: Var,
        x: Var,
        layout: Rc<SeqLayout>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Rc<[usize]>,
        probs: Vec<f64>,
    },
    MeanRowEntropy(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Work counters collected while recording.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TapeStats {
    /// Multiply-adds spent in sparse × dense products.
    pub sparse_madds: u64,
    /// Number of sparse × dense products.
    pub sparse_products: u64,
    /// Bytes held by the outputs of sparse products.
    pub sparse_output_bytes: u64,
    /// Bytes held by every recorded value.
    pub value_bytes: u64,
}

/// Gradients keyed by parameter name, in registration order.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: IndexMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor) {
        self.map.insert(name.into(), grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Adds zero gradients for every store parameter the tape never saw.
    pub fn fill_missing(&mut self, store: &crate::optim::ParameterStore) {
        for (name, value) in store.iter() {
            if !self.map.contains_key(name) {
                self.map.insert(name.to_string(), Tensor::zeros(value.shape()));
            }
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
    stats: TapeStats,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn stats(&self) -> &TapeStats {
        &self.stats
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.stats.value_bytes += (value.len() * std::mem::size_of::<f64>()) as u64;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers a trainable tensor. Registering the same name twice returns
    /// the original node.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// Sum of several same-shape nodes.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("add_n of zero operands".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// `x + b` with `b` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let cols = xv.cols();
        if xv.rank() != 2 || bv.len() != cols {
            return Err(mismatch("add_row", xv, bv));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMulT(a, b), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    /// `ln(1 + x)`; inputs must exceed −1.
    pub fn ln1p(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln_1p);
        let rg = self.rg(&[a]);
        self.push(v, Op::Ln1p(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Numerically stable softmax along the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalization followed by `gamma ⊙ x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if d == 0 || gv.len() != d || bv.len() != d {
            return Err(mismatch("layer_norm", xv, gv));
        }
        let n = xv.rows();
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = Tensor::zeros(xv.shape());
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            let orow = out.row_mut(r);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                orow[j] = gv.data()[j] * h + bv.data()[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row `r` of the output is `table[index[r]]`, or zeros for `None`.
    pub fn gather_rows(&mut self, table: Var, index: Rc<[Option<usize>]>) -> Result<Var> {
        let tv = self.value(table);
        let (n, c) = (tv.rows(), tv.cols());
        if tv.rank() != 2 {
            return Err(mismatch("gather_rows", tv, tv));
        }
        let mut out = vec![0.0; index.len() * c];
        for (r, idx) in index.iter().enumerate() {
            if let Some(i) = *idx {
                if i >= n {
                    return Err(Error::IndexOutOfRange(format!(
                        "gather_rows: row {i} of a {n}-row table"
                    )));
                }
                out[r * c..(r + 1) * c].copy_from_slice(tv.row(i));
            }
        }
        let v = Tensor::matrix(index.len(), c, out)?;
        let rg = self.rg(&[table]);
        Ok(self.push(v, Op::GatherRows { table, index }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_rows of zero parts".into()))?;
        let c = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c || pv.rank() != 2 {
                return Err(mismatch("concat_rows", self.value(*first), pv));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let v = Tensor::matrix(rows, c, data)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + len > xv.rows() || xv.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "slice_rows",
                lhs: xv.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let c = xv.cols();
        let v = Tensor::matrix(len, c, xv.data()[start * c..(start + len) * c].to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::SliceRows { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat_cols of zero parts".into()))?;
        let n = self.value(*first).rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.rows() != n {
                return Err(mismatch("concat_cols", self.value(*first), pv));
            }
            total += pv.cols();
        }
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            let c = pv.cols();
            for r in 0..n {
                out[r * total + off..r * total + off + c].copy_from_slice(pv.row(r));
            }
            off += c;
        }
        let v = Tensor::matrix(n, total, out)?;
        let rg = self.rg(parts);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Column `j` of a matrix as an `n × 1` node.
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let xv = self.value(x);
        if j >= xv.cols() {
            return Err(Error::IndexOutOfRange(format!("column {j} of {:?}", xv.shape())));
        }
        let c = xv.cols();
        let sel = Tensor::matrix(c, 1, (0..c).map(|k| if k == j { 1.0 } else { 0.0 }).collect())?;
        let s = self.constant(sel);
        self.matmul(x, s)
    }

    /// Multiplies row `i` of `x` by `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.len() != xv.rows() {
            return Err(mismatch("scale_rows", xv, wv));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let s = wv.data()[r];
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(out, Op::ScaleRows { x, w }, rg))
    }

    /// Sparse × dense product with a constant sparse matrix.
    pub fn spmm(&mut self, mat: Rc<CsrMatrix>, x: Var) -> Result<Var> {
        let v = mat.spmm(self.value(x))?;
        self.stats.sparse_madds += (mat.nnz() * v.cols()) as u64;
        self.stats.sparse_products += 1;
        self.stats.sparse_output_bytes += (v.len() * std::mem::size_of::<f64>()) as u64;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::SpMM { mat, x }, rg))
    }

    /// À-trous filtering along the rows of each sequence in `layout`.
    pub fn dilated_conv(
        &mut self,
        x: Var,
        filter: Rc<[f64]>,
        dilation: usize,
        mode: PaddingMode,
        layout: Rc<SeqLayout>,
    ) -> Result<Var> {
        let xv = self.value(x);
        if xv.rows() != layout.total_rows() || xv.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "dilated_conv",
                lhs: xv.shape().to_vec(),
                rhs: vec![layout.total_rows()],
            });
        }
        let w = xv.cols();
        let out = dilated_conv_forward(xv.data(), w, &layout, &filter, dilation, mode);
        let v = Tensor::matrix(xv.rows(), w, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            v,
            Op::DilatedConv {
                x,
                filter,
                dilation,
                mode,
                layout,
            },
            rg,
        ))
    }

    /// Mean squared row norm over the valid rows of each sequence; `n × 1`.
    pub fn segment_energy(&mut self, x: Var, layout: Rc<SeqLayout>) -> Result<Var> {
        let xv = self.value(x);
        check_layout("segment_energy", xv, &layout)?;
        let c = xv.cols();
        let out: Vec<f64> = (0..layout.num_seqs())
            .map(|s| {
                let rows = layout.valid_rows(s);
                let len = rows.len() as f64;
                xv.data()[rows.start * c..rows.end * c]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    / len
            })
            .collect();
        let v = Tensor::matrix(layout.num_seqs(), 1, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::SegmentEnergy { x, layout }, rg))
    }

    /// Spectral flatness of each channel over the valid rows of a sequence,
    /// averaged over channels; `n × 1`.
    pub fn segment_flatness(&mut self, x: Var, layout: Rc<SeqLayout>) -> Result<Var> {
        let xv = self.value(x);
        check_layout("segment_flatness", xv, &layout)?;
        let c = xv.cols();
        let mut planner = FftPlanner::new();
        let mut spectra = Vec::new();
        let mut flat = Vec::with_capacity(layout.num_seqs() * c);
        let mut mean_power = Vec::with_capacity(layout.num_seqs() * c);
        let mut out = Vec::with_capacity(layout.num_seqs());
        let mut column = Vec::new();
        for s in 0..layout.num_seqs() {
            let rows = layout.valid_rows(s);
            let n = rows.len() as f64;
            let mut acc = 0.0;
            for ch in 0..c {
                column.clear();
                column.extend(rows.clone().map(|r| xv.data()[r * c + ch]));
                let spec = complex_spectrum(&mut planner, &column);
                let mut log_sum = 0.0;
                let mut pow_sum = 0.0;
                for z in &spec {
                    let p = z.norm_sqr();
                    log_sum += (p + LOG_EPS).ln();
                    pow_sum += p;
                }
                let a = pow_sum / n;
                let sfm = (log_sum / n).exp() / (a + LOG_EPS);
                flat.push(sfm);
                mean_power.push(a);
                acc += sfm;
                spectra.extend(spec);
            }
            out.push(acc / c as f64);
        }
        let v = Tensor::matrix(layout.num_seqs(), 1, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            v,
            Op::SegmentFlatness {
                x,
                layout,
                spectra,
                flat,
                mean_power,
            },
            rg,
        ))
    }

    /// Softmax of `rows × 1` scores within the valid rows of each sequence;
    /// padding rows get weight zero.
    pub fn segment_softmax(&mut self, scores: Var, layout: Rc<SeqLayout>) -> Result<Var> {
        let sv = self.value(scores);
        check_layout("segment_softmax", sv, &layout)?;
        if sv.cols() != 1 {
            return Err(mismatch("segment_softmax", sv, sv));
        }
        let mut out = vec![0.0; sv.len()];
        for s in 0..layout.num_seqs() {
            let rows = layout.valid_rows(s);
            out[rows.clone()].copy_from_slice(&sv.data()[rows.clone()]);
            softmax_in_place(&mut out[rows]);
        }
        let v = Tensor::matrix(sv.rows(), 1, out)?;
        let rg = self.rg(&[scores]);
        Ok(self.push(v, Op::SegmentSoftmax { scores, layout }, rg))
    }

    /// `out[s] = Σ_t w_t x_t` over the valid rows of sequence `s`.
    pub fn segment_weighted_sum(&mut self, w: Var, x: Var, layout: Rc<SeqLayout>) -> Result<Var> {
        let (wv, xv) = (self.value(w), self.value(x));
        check_layout("segment_weighted_sum", xv, &layout)?;
        if wv.len() != xv.rows() {
            return Err(mismatch("segment_weighted_sum", wv, xv));
        }
        let c = xv.cols();
        let mut out = vec![0.0; layout.num_seqs() * c];
        for s in 0..layout.num_seqs() {
            let orow = &mut out[s * c..(s + 1) * c];
            for r in layout.valid_rows(s) {
                let a = wv.data()[r];
                for (o, &v) in orow.iter_mut().zip(xv.row(r)) {
                    *o += a * v;
                }
            }
        }
        let v = Tensor::matrix(layout.num_seqs(), c, out)?;
        let rg = self.rg(&[w, x]);
        Ok(self.push(v, Op::SegmentWeightedSum { w, x, layout }, rg))
    }

    /// `Σ_i −log softmax(logits_i)[targets_i]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Rc<[usize]>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != targets.len() || lv.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let m = lv.cols();
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= m {
                return Err(Error::IndexOutOfRange(format!("target {t} of {m} classes")));
            }
            let row = &mut probs[r * m..(r + 1) * m];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            },
            rg,
        ))
    }

    /// Mean over rows of `−Σ_j g_j ln(g_j + ε)`.
    pub fn mean_row_entropy(&mut self, g: Var) -> Var {
        let gv = self.value(g);
        let n = gv.rows().max(1) as f64;
        let total: f64 = gv.data().iter().map(|&p| -p * (p + LOG_EPS).ln()).sum();
        let rg = self.rg(&[g]);
        self.push(Tensor::scalar(total / n), Op::MeanRowEntropy(g), rg)
    }

    /// Reverse sweep from a scalar node. Returns a gradient for every
    /// registered parameter; unreachable ones get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (name, &v) in &self.params {
            let g = grads[v.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor>], v: Var) -> Option<&'a mut [f64]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        Some(
            grads[v.0]
                .get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()))
                .data_mut(),
        )
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(s) = self.slot(grads, v) {
                        axpy(s, 1.0, gd);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = self.slot(grads, *a) {
                    axpy(s, 1.0, gd);
                }
                if let Some(s) = self.slot(grads, *b) {
                    axpy(s, -1.0, gd);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, &gg), &bb) in s.iter_mut().zip(gd).zip(bv) {
                        *o += gg * bb;
                    }
                }
                if let Some(s) = self.slot(grads, *b) {
                    for ((o, &gg), &aa) in s.iter_mut().zip(gd).zip(av) {
                        *o += gg * aa;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(s) = self.slot(grads, *a) {
                    axpy(s, *c, gd);
                }
            }
            Op::AddRow(x, b) => {
                if let Some(s) = self.slot(grads, *x) {
                    axpy(s, 1.0, gd);
                }
                let cols = y.cols();
                if let Some(s) = self.slot(grads, *b) {
                    for r in 0..y.rows() {
                        for (o, &gg) in s.iter_mut().zip(&gd[r * cols..(r + 1) * cols]) {
                            *o += gg;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if let Some(s) = self.slot(grads, *a) {
                    gemm_nt(gd, bv.data(), m, n, k, s);
                }
                if let Some(s) = self.slot(grads, *b) {
                    gemm_tn(av.data(), gd, m, k, n, s);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                if let Some(s) = self.slot(grads, *a) {
                    gemm_nn(gd, bv.data(), m, n, k, s);
                }
                if let Some(s) = self.slot(grads, *b) {
                    gemm_tn(gd, av.data(), m, n, k, s);
                }
            }
            Op::Tanh(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, &gg), &yy) in s.iter_mut().zip(gd).zip(y.data()) {
                        *o += gg * (1.0 - yy * yy);
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, &gg), &yy) in s.iter_mut().zip(gd).zip(y.data()) {
                        if yy > 0.0 {
                            *o += gg;
                        }
                    }
                }
            }
            Op::Ln1p(a) => {
                let av = self.value(*a).data();
                if let Some(s) = self.slot(grads, *a) {
                    for ((o, &gg), &x) in s.iter_mut().zip(gd).zip(av) {
                        *o += gg / (1.0 + x);
                    }
                }
            }
            Op::Sum(a) => {
                let gg = gd[0];
                if let Some(s) = self.slot(grads, *a) {
                    for o in s.iter_mut() {
                        *o += gg;
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let c = y.cols();
                if let Some(s) = self.slot(grads, *a) {
                    for r in 0..y.rows() {
                        softmax_backward(&y.data()[r * c..(r + 1) * c], &gd[r * c..(r + 1) * c], &mut s[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = y.cols();
                let n = y.rows();
                let gam = self.value(*gamma).data().to_vec();
                if let Some(s) = self.slot(grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..n {
                        let grow = &gd[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = grow[j] * gam[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh = dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            s[r * d + j] += inv_std[r] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *gamma) {
                    for r in 0..n {
                        for j in 0..d {
                            s[j] += gd[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *beta) {
                    for r in 0..n {
                        for j in 0..d {
                            s[j] += gd[r * d + j];
                        }
                    }
                }
            }
            Op::GatherRows { table, index } => {
                let c = y.cols();
                if let Some(s) = self.slot(grads, *table) {
                    for (r, idx) in index.iter().enumerate() {
                        if let Some(i) = *idx {
                            axpy(&mut s[i * c..(i + 1) * c], 1.0, &gd[r * c..(r + 1) * c]);
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(s) = self.slot(grads, p) {
                        axpy(s, 1.0, &gd[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let c = y.cols();
                if let Some(s) = self.slot(grads, *x) {
                    axpy(&mut s[start * c..start * c + gd.len()], 1.0, gd);
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if let Some(s) = self.slot(grads, p) {
                        for r in 0..y.rows() {
                            axpy(&mut s[r * c..(r + 1) * c], 1.0, &gd[r * total + off..r * total + off + c]);
                        }
                    }
                    off += c;
                }
            }
            Op::ScaleRows { x, w } => {
                let c = y.cols();
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                if let Some(s) = self.slot(grads, *x) {
                    for r in 0..y.rows() {
                        axpy(&mut s[r * c..(r + 1) * c], wv[r], &gd[r * c..(r + 1) * c]);
                    }
                }
                if let Some(s) = self.slot(grads, *w) {
                    for r in 0..y.rows() {
                        s[r] += crate::tensor::dot(&gd[r * c..(r + 1) * c], &xv[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::SpMM { mat, x } => {
                if let Some(s) = self.slot(grads, *x) {
                    mat.spmm_t_into(gd, y.cols(), s);
                }
            }
            Op::DilatedConv {
                x,
                filter,
                dilation,
                mode,
                layout,
            } => {
                if let Some(s) = self.slot(grads, *x) {
                    dilated_conv_backward(gd, y.cols(), layout, filter, *dilation, *mode, s);
                }
            }
            Op::SegmentEnergy { x, layout } => {
                let xv = self.value(*x);
                let c = xv.cols();
                if let Some(s) = self.slot(grads, *x) {
                    for seq in 0..layout.num_seqs() {
                        let rows = layout.valid_rows(seq);
                        let k = 2.0 * gd[seq] / rows.len() as f64;
                        for i in rows.start * c..rows.end * c {
                            s[i] += k * xv.data()[i];
                        }
                    }
                }
            }
            Op::SegmentFlatness {
                x,
                layout,
                spectra,
                flat,
                mean_power,
            } => {
                let c = self.value(*x).cols();
                if let Some(s) = self.slot(grads, *x) {
                    let mut planner = FftPlanner::new();
                    let mut off = 0;
                    for seq in 0..layout.num_seqs() {
                        let rows = layout.valid_rows(seq);
                        let n = rows.len();
                        let up = gd[seq] / c as f64;
                        for ch in 0..c {
                            let sc = flat[seq * c + ch];
                            let a = mean_power[seq * c + ch];
                            let spec = &spectra[off..off + n];
                            off += n;
                            // dSFM/dp_f, folded with conj(X_f); the adjoint of
                            // p_f = |X_f|² is 2·Re(DFT(q ⊙ conj X)).
                            let k = up * sc / n as f64;
                            let weighted: Vec<Complex64> = spec
                                .iter()
                                .map(|z| {
                                    let q = k * (1.0 / (z.norm_sqr() + LOG_EPS) - 1.0 / (a + LOG_EPS));
                                    z.conj() * q
                                })
                                .collect();
                            let mut cbuf = weighted;
                            planner.plan_fft_forward(n).process(&mut cbuf);
                            for (t, r) in rows.clone().enumerate() {
                                s[r * c + ch] += 2.0 * cbuf[t].re;
                            }
                        }
                    }
                }
            }
            Op::SegmentSoftmax { scores, layout } => {
                if let Some(s) = self.slot(grads, *scores) {
                    for seq in 0..layout.num_seqs() {
                        let rows = layout.valid_rows(seq);
                        softmax_backward(&y.data()[rows.clone()], &gd[rows.clone()], &mut s[rows]);
                    }
                }
            }
            Op::SegmentWeightedSum { w, x, layout } => {
                let (wv, xv) = (self.value(*w), self.value(*x));
                let c = xv.cols();
                if let Some(s) = self.slot(grads, *w) {
                    for seq in 0..layout.num_seqs() {
                        let grow = &gd[seq * c..(seq + 1) * c];
                        for r in layout.valid_rows(seq) {
                            s[r] += crate::tensor::dot(grow, xv.row(r));
                        }
                    }
                }
                if let Some(s) = self.slot(grads, *x) {
                    for seq in 0..layout.num_seqs() {
                        let grow = &gd[seq * c..(seq + 1) * c];
                        for r in layout.valid_rows(seq) {
                            axpy(&mut s[r * c..(r + 1) * c], wv.data()[r], grow);
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let m = self.value(*logits).cols();
                let up = gd[0];
                if let Some(s) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..m {
                            s[r * m + j] += up * probs[r * m + j];
                        }
                        s[r * m + t] -= up;
                    }
                }
            }
            Op::MeanRowEntropy(gv) => {
                let gvals = self.value(*gv);
                let n = gvals.rows().max(1) as f64;
                let up = gd[0];
                if let Some(s) = self.slot(grads, *gv) {
                    for (o, &p) in s.iter_mut().zip(gvals.data()) {
                        *o -= up * ((p + LOG_EPS).ln() + p / (p + LOG_EPS)) / n;
                    }
                }
            }
        }
    }
}

fn check_layout(op: &'static str, x: &Tensor, layout: &SeqLayout) -> Result<()> {
    if x.rows() != layout.total_rows() || x.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: vec![layout.total_rows()],
        });
    }
    Ok(())
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Max-shifted softmax in place.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn softmax_backward(y: &[f64], g: &[f64], dst: &mut [f64]) {
    let inner: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((d, &yy), &gg) in dst.iter_mut().zip(y).zip(g) {
        *d += yy * (gg - inner);
    }
}
