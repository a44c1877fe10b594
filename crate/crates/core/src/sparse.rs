//! Compressed sparse row matrices and the sparse × dense product used by
//! graph propagation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Validates raw CSR arrays. Column indices must be sorted within a row.
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if indptr.len() != n_rows + 1 || indptr[0] != 0 {
            return Err(Error::Format(format!(
                "csr indptr has length {} for {} rows",
                indptr.len(),
                n_rows
            )));
        }
        if indices.len() != values.len() || *indptr.last().unwrap() != indices.len() {
            return Err(Error::Format("csr indices/values/indptr disagree".into()));
        }
        for r in 0..n_rows {
            if indptr[r] > indptr[r + 1] {
                return Err(Error::Format(format!("csr indptr decreases at row {r}")));
            }
            let row = &indices[indptr[r]..indptr[r + 1]];
            if row.windows(2).any(|w| w[0] >= w[1]) || row.iter().any(|&c| c >= n_cols) {
                return Err(Error::Format(format!("csr row {r} has unsorted or out-of-range columns")));
            }
        }
        Ok(Self {
            n_rows,
            n_cols,
            indptr,
            indices,
            values,
        })
    }

    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n_rows: usize, n_cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(r, c, _)) = triplets.iter().find(|&&(r, c, _)| r >= n_rows || c >= n_cols) {
            return Err(Error::IndexOutOfRange(format!(
                "entry ({r}, {c}) outside {n_rows}x{n_cols}"
            )));
        }
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; n_rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..n_rows {
            indptr[r + 1] += indptr[r];
        }
        Self::new(n_rows, n_cols, indptr, indices, values)
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            indptr: vec![0; n_rows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.indptr[r]..self.indptr[r + 1];
        match self.indices[span.clone()].binary_search(&c) {
            Ok(pos) => self.values[span.start + pos],
            Err(_) => 0.0,
        }
    }

    /// Maps every stored value through `f(row, col, value)`.
    pub fn map_values(&self, f: impl Fn(usize, usize, f64) -> f64) -> Self {
        let mut out = self.clone();
        for r in 0..self.n_rows {
            for p in self.indptr[r]..self.indptr[r + 1] {
                out.values[p] = f(r, self.indices[p], self.values[p]);
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let triplets = (0..self.n_rows)
            .flat_map(|r| self.row(r).map(move |(c, v)| (c, r, v)))
            .collect();
        Self::from_triplets(self.n_cols, self.n_rows, triplets).expect("transpose of valid csr")
    }

    /// Structural and numerical symmetry (exact equality).
    pub fn is_symmetric(&self) -> bool {
        self.n_rows == self.n_cols && self.transpose() == *self
    }

    pub fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.n_rows, self.n_cols]);
        let n = self.n_cols;
        for r in 0..self.n_rows {
            for (c, v) in self.row(r) {
                t.data_mut()[r * n + c] = v;
            }
        }
        t
    }

    /// `out += self · x` where `x` is `n_cols × width` row-major.
    pub fn spmm_into(&self, x: &[f64], width: usize, out: &mut [f64]) {
        for r in 0..self.n_rows {
            let orow = &mut out[r * width..(r + 1) * width];
            for p in self.indptr[r]..self.indptr[r + 1] {
                let v = self.values[p];
                let c = self.indices[p];
                for (o, &xv) in orow.iter_mut().zip(&x[c * width..(c + 1) * width]) {
                    *o += v * xv;
                }
            }
        }
    }

    /// `out += selfᵀ · x` where `x` is `n_rows × width` row-major.
    pub fn spmm_t_into(&self, x: &[f64], width: usize, out: &mut [f64]) {
        for r in 0..self.n_rows {
            let xrow = &x[r * width..(r + 1) * width];
            for p in self.indptr[r]..self.indptr[r + 1] {
                let v = self.values[p];
                let c = self.indices[p];
                for (o, &xv) in out[c * width..(c + 1) * width].iter_mut().zip(xrow) {
                    *o += v * xv;
                }
            }
        }
    }

    /// Dense product `self · x`.
    pub fn spmm(&self, x: &Tensor) -> Result<Tensor> {
        if x.rows() != self.n_cols || x.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "spmm",
                lhs: vec![self.n_rows, self.n_cols],
                rhs: x.shape().to_vec(),
            });
        }
        let w = x.cols();
        let mut out = vec![0.0; self.n_rows * w];
        self.spmm_into(x.data(), w, &mut out);
        Tensor::matrix(self.n_rows, w, out)
    }
}
