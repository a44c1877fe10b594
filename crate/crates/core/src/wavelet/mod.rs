//! Stationary (undecimated) wavelet packet decomposition of embedded
//! sequences, boundary extension with learnable tokens, and per-subband
//! energy / spectral-flatness descriptors.
//!
//! Every function here has a tape-free form operating on a single `T × d`
//! tensor and a tape form operating on a packed batch described by a
//! [`SeqLayout`]. Both run the same kernels.

pub mod filters;
pub mod transform;

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::layout::SeqLayout;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use filters::{filter_bank, FilterPair, WaveletFamily};
pub use transform::{resolve_index, PaddingMode};

/// Learnable rows placed before and after every sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryTokens {
    pub left: Tensor,
    pub right: Tensor,
}

impl BoundaryTokens {
    pub fn new(left: Tensor, right: Tensor) -> Result<Self> {
        if left.shape() != right.shape() || (left.rank() != 2 && !left.is_empty()) {
            return Err(Error::ShapeMismatch {
                op: "boundary_tokens",
                lhs: left.shape().to_vec(),
                rhs: right.shape().to_vec(),
            });
        }
        Ok(Self { left, right })
    }

    pub fn empty(d: usize) -> Self {
        Self {
            left: Tensor::zeros(&[0, d]),
            right: Tensor::zeros(&[0, d]),
        }
    }

    pub fn tau(&self) -> usize {
        self.left.rows()
    }
}

/// `B = 2^level` equal-length subbands in natural binary order: bit `j−1`
/// of the index (counting from the most significant level-1 bit) is 0 for
/// the low branch and 1 for the high branch at level `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandStack {
    pub subbands: Vec<Tensor>,
    pub level: usize,
}

impl SubbandStack {
    pub fn num_subbands(&self) -> usize {
        self.subbands.len()
    }
}

/// Energy and spectral flatness of every subband of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandDescriptor {
    pub energy: Vec<f64>,
    pub sfm: Vec<f64>,
    pub level: usize,
}

/// `[left tokens; x; right tokens]`.
pub fn extend_boundary(x: &Tensor, tokens: &BoundaryTokens) -> Result<Tensor> {
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("extend_boundary needs at least one row".into()));
    }
    let d = x.cols();
    if tokens.tau() > 0 && tokens.left.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "extend_boundary",
            lhs: x.shape().to_vec(),
            rhs: tokens.left.shape().to_vec(),
        });
    }
    let mut data = Vec::with_capacity((x.rows() + 2 * tokens.tau()) * d);
    data.extend_from_slice(tokens.left.data());
    data.extend_from_slice(x.data());
    data.extend_from_slice(tokens.right.data());
    Tensor::matrix(x.rows() + 2 * tokens.tau(), d, data)
}

fn as_matrix(x: &Tensor) -> Result<Tensor> {
    match x.rank() {
        1 => x.clone().reshape(vec![x.len(), 1]),
        2 => Ok(x.clone()),
        _ => Err(Error::ShapeMismatch {
            op: "wavelet",
            lhs: x.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

/// One undecimated split at tree level `level` (dilation `2^(level-1)`).
pub fn swpt_level(parent: &Tensor, filters: &FilterPair, level: usize, mode: PaddingMode) -> Result<(Tensor, Tensor)> {
    if level == 0 {
        return Err(Error::InvalidArgument("swpt_level counts levels from 1".into()));
    }
    let x = as_matrix(parent)?;
    let mut tape = Tape::new();
    let layout = Rc::new(SeqLayout::single(x.rows()));
    let xv = tape.constant(x);
    let dil = 1usize << (level - 1);
    let lo = tape.dilated_conv(xv, filters.low.clone().into(), dil, mode, layout.clone())?;
    let hi = tape.dilated_conv(xv, filters.high.clone().into(), dil, mode, layout)?;
    let shape = parent.shape().to_vec();
    Ok((tape.value(lo).clone().reshape(shape.clone())?, tape.value(hi).clone().reshape(shape)?))
}

/// Full-tree stationary wavelet packet transform to depth `level`.
pub fn swpt(x: &Tensor, family: WaveletFamily, level: usize, mode: PaddingMode) -> Result<SubbandStack> {
    let xm = as_matrix(x)?;
    let mut tape = Tape::new();
    let layout = Rc::new(SeqLayout::single(xm.rows()));
    let xv = tape.constant(xm);
    let leaves = swpt_on_tape(&mut tape, xv, &FilterPair::new(family), level, mode, layout)?;
    let subbands = leaves
        .into_iter()
        .map(|v| tape.value(v).clone().reshape(x.shape().to_vec()))
        .collect::<Result<_>>()?;
    Ok(SubbandStack { subbands, level })
}

/// Records the packet tree on `tape` and returns its leaves in natural
/// binary order. `level == 0` returns `[x]`.
pub fn swpt_on_tape(
    tape: &mut Tape,
    x: Var,
    filters: &FilterPair,
    level: usize,
    mode: PaddingMode,
    layout: Rc<SeqLayout>,
) -> Result<Vec<Var>> {
    let low: Rc<[f64]> = filters.low.clone().into();
    let high: Rc<[f64]> = filters.high.clone().into();
    let mut nodes = vec![x];
    for j in 1..=level {
        let dil = 1usize << (j - 1);
        let mut next = Vec::with_capacity(nodes.len() * 2);
        for &n in &nodes {
            next.push(tape.dilated_conv(n, low.clone(), dil, mode, layout.clone())?);
            next.push(tape.dilated_conv(n, high.clone(), dil, mode, layout.clone())?);
        }
        nodes = next;
    }
    Ok(nodes)
}

/// `(1/T') Σ_t ‖Z(t,:)‖²`.
pub fn subband_energy(z: &Tensor) -> Result<f64> {
    let zm = as_matrix(z)?;
    if zm.rows() == 0 {
        return Ok(0.0);
    }
    let mut tape = Tape::new();
    let layout = Rc::new(SeqLayout::single(zm.rows()));
    let zv = tape.constant(zm);
    let e = tape.segment_energy(zv, layout)?;
    tape.value(e).item()
}

/// Channel-averaged spectral flatness over the time axis, in `[0, 1]`.
pub fn spectral_flatness(z: &Tensor) -> Result<f64> {
    let zm = as_matrix(z)?;
    if zm.rows() == 0 {
        return Err(Error::InvalidArgument("spectral_flatness of an empty sequence".into()));
    }
    let mut tape = Tape::new();
    let layout = Rc::new(SeqLayout::single(zm.rows()));
    let zv = tape.constant(zm);
    let s = tape.segment_flatness(zv, layout)?;
    tape.value(s).item()
}

/// Energy and flatness of every subband in a stack.
pub fn describe(stack: &SubbandStack) -> Result<SubbandDescriptor> {
    let mut energy = Vec::with_capacity(stack.num_subbands());
    let mut sfm = Vec::with_capacity(stack.num_subbands());
    for z in &stack.subbands {
        energy.push(subband_energy(z)?);
        sfm.push(spectral_flatness(z)?);
    }
    Ok(SubbandDescriptor {
        energy,
        sfm,
        level: stack.level,
    })
}
