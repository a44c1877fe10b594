//! Standard layers expressed as tape ops, plus tape-free convenience
//! wrappers that evaluate them on constants.

use crate::error::{Error, Result};
use crate::optim::ParameterStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Row-wise softmax along `axis` (0 or 1) of a rank-2 tensor, or of a vector.
pub fn softmax(logits: &Tensor, axis: usize) -> Result<Tensor> {
    let t = match logits.rank() {
        1 if axis == 0 => logits.clone().reshape(vec![1, logits.len()])?,
        2 if axis == 1 => logits.clone(),
        2 if axis == 0 => logits.transpose()?,
        _ => {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} on shape {:?}",
                logits.shape()
            )))
        }
    };
    let mut tape = Tape::new();
    let x = tape.constant(t);
    let y = tape.softmax_rows(x);
    let out = tape.value(y).clone();
    match (logits.rank(), axis) {
        (1, _) => out.reshape(logits.shape().to_vec()),
        (2, 0) => out.transpose(),
        _ => Ok(out),
    }
}

/// Layer normalization over the last axis with affine `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let xt = if x.rank() == 1 {
        x.clone().reshape(vec![1, x.len()])?
    } else {
        x.clone()
    };
    let mut tape = Tape::new();
    let (xv, g, b) = (
        tape.constant(xt),
        tape.constant(gamma.clone()),
        tape.constant(beta.clone()),
    );
    let y = tape.layer_norm(xv, g, b)?;
    tape.value(y).clone().reshape(x.shape().to_vec())
}

/// One affine layer of an MLP: `x · weight + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Applies affine layers with ReLU between them and none after the last.
pub fn mlp_apply(layers: &[AffineLayer], x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mut h = tape.constant(x.clone());
    for (i, layer) in layers.iter().enumerate() {
        let w = tape.constant(layer.weight.clone());
        let b = tape.constant(layer.bias.clone());
        let z = tape.matmul(h, w)?;
        h = tape.add_row(z, b)?;
        if i + 1 < layers.len() {
            h = tape.relu(h);
        }
    }
    Ok(tape.value(h).clone())
}

/// Names and widths of an MLP whose weights live in a [`ParameterStore`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    prefix: String,
    dims: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, dims: Vec<usize>) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("mlp dims {dims:?}")));
        }
        Ok(Self {
            prefix: prefix.into(),
            dims,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn weight_name(&self, layer: usize) -> String {
        format!("{}.w{layer}", self.prefix)
    }

    pub fn bias_name(&self, layer: usize) -> String {
        format!("{}.b{layer}", self.prefix)
    }

    /// Xavier-uniform weights and zero biases.
    pub fn init(&self, store: &mut ParameterStore) -> Result<()> {
        for l in 0..self.num_layers() {
            store.init_xavier(&self.weight_name(l), self.dims[l], self.dims[l + 1])?;
            store.init_const(&self.bias_name(l), &[self.dims[l + 1]], 0.0)?;
        }
        Ok(())
    }

    pub fn layers(&self, store: &ParameterStore) -> Result<Vec<AffineLayer>> {
        (0..self.num_layers())
            .map(|l| {
                Ok(AffineLayer {
                    weight: store.require(&self.weight_name(l))?.clone(),
                    bias: store.require(&self.bias_name(l))?.clone(),
                })
            })
            .collect()
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Result<Var> {
        let mut h = x;
        for l in 0..self.num_layers() {
            let w = tape.param(&self.weight_name(l), store.require(&self.weight_name(l))?);
            let b = tape.param(&self.bias_name(l), store.require(&self.bias_name(l))?);
            let z = tape.matmul(h, w)?;
            h = tape.add_row(z, b)?;
            if l + 1 < self.num_layers() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }
}
