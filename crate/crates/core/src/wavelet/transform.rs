//! À-trous filtering kernels shared by the plain transform and the
//! differentiable tape op.

use serde::{Deserialize, Serialize};

use crate::layout::SeqLayout;

/// How taps that fall outside a sequence are resolved.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    /// Wrap modulo the sequence length.
    Periodic,
    /// Half-sample reflection: `x[-1] = x[0]`, `x[n] = x[n-1]`.
    Symmetric,
}

impl std::str::FromStr for PaddingMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s.trim() {
            "periodic" => Ok(PaddingMode::Periodic),
            "symmetric" => Ok(PaddingMode::Symmetric),
            other => Err(crate::Error::Config(format!(
                "unknown padding mode '{other}' (periodic|symmetric)"
            ))),
        }
    }
}

impl std::fmt::Display for PaddingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PaddingMode::Periodic => "periodic",
            PaddingMode::Symmetric => "symmetric",
        })
    }
}

pub fn resolve_index(i: isize, n: usize, mode: PaddingMode) -> usize {
    let n_i = n as isize;
    match mode {
        PaddingMode::Periodic => i.rem_euclid(n_i) as usize,
        PaddingMode::Symmetric => {
            let m = i.rem_euclid(2 * n_i);
            if m < n_i {
                m as usize
            } else {
                (2 * n_i - 1 - m) as usize
            }
        }
    }
}

/// Source row of every `(t, k)` tap for one sequence length.
fn tap_table(n: usize, taps: usize, dilation: usize, mode: PaddingMode) -> Vec<usize> {
    let mut table = Vec::with_capacity(n * taps);
    for t in 0..n {
        for k in 0..taps {
            table.push(resolve_index(t as isize - (k * dilation) as isize, n, mode));
        }
    }
    table
}

/// `out_t = Σ_k filter_k · x_{t − k·dilation}` per channel, independently
/// within the valid rows of every sequence. Padding rows of the output are
/// zero.
pub(crate) fn dilated_conv_forward(
    x: &[f64],
    width: usize,
    layout: &SeqLayout,
    filter: &[f64],
    dilation: usize,
    mode: PaddingMode,
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let taps = filter.len();
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for seq in 0..layout.num_seqs() {
        let base = layout.valid_rows(seq).start;
        let n = layout.valid_len(seq);
        if cached.as_ref().map(|c| c.0) != Some(n) {
            cached = Some((n, tap_table(n, taps, dilation, mode)));
        }
        let table = &cached.as_ref().unwrap().1;
        for t in 0..n {
            let orow = (base + t) * width;
            for (k, &f) in filter.iter().enumerate() {
                let src = (base + table[t * taps + k]) * width;
                for c in 0..width {
                    out[orow + c] += f * x[src + c];
                }
            }
        }
    }
    out
}

/// Adjoint of [`dilated_conv_forward`].
pub(crate) fn dilated_conv_backward(
    grad_out: &[f64],
    width: usize,
    layout: &SeqLayout,
    filter: &[f64],
    dilation: usize,
    mode: PaddingMode,
    grad_x: &mut [f64],
) {
    let taps = filter.len();
    let mut cached: Option<(usize, Vec<usize>)> = None;
    for seq in 0..layout.num_seqs() {
        let base = layout.valid_rows(seq).start;
        let n = layout.valid_len(seq);
        if cached.as_ref().map(|c| c.0) != Some(n) {
            cached = Some((n, tap_table(n, taps, dilation, mode)));
        }
        let table = &cached.as_ref().unwrap().1;
        for t in 0..n {
            let grow = (base + t) * width;
            for (k, &f) in filter.iter().enumerate() {
                let dst = (base + table[t * taps + k]) * width;
                for c in 0..width {
                    grad_x[dst + c] += f * grad_out[grow + c];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_reflection_indices() {
        let n = 4;
        let got: Vec<usize> = (-5..9).map(|i| resolve_index(i, n, PaddingMode::Symmetric)).collect();
        assert_eq!(got, vec![3, 3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0, 0]);
        assert_eq!(resolve_index(-1, n, PaddingMode::Periodic), 3);
        assert_eq!(resolve_index(-9, n, PaddingMode::Periodic), 3);
    }

    #[test]
    fn padding_rows_stay_zero() {
        let layout = SeqLayout::new(4, vec![2, 0]).unwrap();
        let x = vec![9.0, 9.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0];
        let out = dilated_conv_forward(&x, 1, &layout, &[0.5, 0.5], 1, PaddingMode::Periodic);
        assert_eq!(&out[..2], &[0.0, 0.0]);
        // first sequence is [1, 2] periodic: [(1+2)/2, (2+1)/2]
        assert_eq!(&out[2..4], &[1.5, 1.5]);
        assert_eq!(&out[4..], &[2.5, 1.5, 2.5, 3.5]);
    }
}
