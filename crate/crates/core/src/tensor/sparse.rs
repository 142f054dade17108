use crate::error::{Error, Result};

use super::Tensor;

/// Constant compressed-sparse-row matrix, used for graph propagation
/// operators that never receive gradients themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Result<Self> {
        if let Some(&(r, c, _)) = triplets.iter().find(|&&(r, c, _)| r >= rows || c >= cols) {
            return Err(Error::shape(format!(
                "triplet ({r}, {c}) outside {rows}x{cols}"
            )));
        }
        triplets.sort_by_key(|a| (a.0, a.1));
        let mut indptr = vec![0; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Ok(Csr {
            rows,
            cols,
            indptr,
            indices,
            values,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_entries(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn to_dense(&self) -> Tensor {
        let mut out = Tensor::zeros(&[self.rows, self.cols]);
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                out.data_mut()[r * self.cols + c] += v;
            }
        }
        out
    }

    /// `self` (R×K) times dense `x` (K×d).
    pub fn matmul(&self, x: &Tensor) -> Result<Tensor> {
        let (k, d) = x.dims2()?;
        if k != self.cols {
            return Err(Error::shape(format!(
                "sparse {}x{} times dense {:?}",
                self.rows,
                self.cols,
                x.shape()
            )));
        }
        let mut out = vec![0.0; self.rows * d];
        for r in 0..self.rows {
            let dst = &mut out[r * d..(r + 1) * d];
            for (c, v) in self.row_entries(r) {
                for (o, &xi) in dst.iter_mut().zip(x.row(c)) {
                    *o += v * xi;
                }
            }
        }
        Ok(Tensor::from_parts(vec![self.rows, d], out))
    }

    /// `selfᵀ` (K×R) times dense `g` (R×d).
    pub fn matmul_transposed(&self, g: &Tensor) -> Result<Tensor> {
        let (r_in, d) = g.dims2()?;
        if r_in != self.rows {
            return Err(Error::shape("transposed sparse product row mismatch"));
        }
        let mut out = vec![0.0; self.cols * d];
        for r in 0..self.rows {
            let src = g.row(r);
            for (c, v) in self.row_entries(r) {
                for (o, &gi) in out[c * d..(c + 1) * d].iter_mut().zip(src) {
                    *o += v * gi;
                }
            }
        }
        Ok(Tensor::from_parts(vec![self.cols, d], out))
    }
}
