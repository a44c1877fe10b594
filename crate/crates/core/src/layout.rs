//! Row layout for a batch of variable-length sequences packed into one
//! matrix.
//!
//! Every sequence occupies `stride` consecutive rows. Its valid rows are the
//! trailing `stride - start` rows; leading rows are padding and stay zero
//! through every sequence-aware op.

use std::ops::Range;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    stride: usize,
    starts: Vec<usize>,
}

impl SeqLayout {
    pub fn new(stride: usize, starts: Vec<usize>) -> Result<Self> {
        if let Some((u, &s)) = starts.iter().enumerate().find(|(_, &s)| s >= stride) {
            return Err(Error::InvalidArgument(format!(
                "sequence {u} has no valid rows (start {s}, stride {stride})"
            )));
        }
        Ok(Self { stride, starts })
    }

    /// One fully valid sequence of `len` rows.
    pub fn single(len: usize) -> Self {
        Self {
            stride: len,
            starts: vec![0],
        }
    }

    pub fn num_seqs(&self) -> usize {
        self.starts.len()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn total_rows(&self) -> usize {
        self.stride * self.starts.len()
    }

    pub fn start(&self, seq: usize) -> usize {
        self.starts[seq]
    }

    pub fn valid_len(&self, seq: usize) -> usize {
        self.stride - self.starts[seq]
    }

    /// Global row range of the valid part of sequence `seq`.
    pub fn valid_rows(&self, seq: usize) -> Range<usize> {
        let base = seq * self.stride;
        base + self.starts[seq]..base + self.stride
    }

    pub fn is_valid(&self, row: usize) -> bool {
        let seq = row / self.stride;
        row % self.stride >= self.starts[seq]
    }
}
