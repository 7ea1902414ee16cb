//! Compressed-sparse-row matrices for the graph propagation operators.
//!
//! The product `spmm` accumulates each output row over the stored entries
//! in ascending column order (left to right, rows top to bottom). Because
//! explicit zeros are never stored, this matches the sum a dense reference
//! obtains by walking the full row left to right, term by term.

use serde::{Deserialize, Serialize};

use crate::error::{CopfError, Result};
use crate::tensor::dense::DenseMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseMatrix {
    rows: usize,
    cols: usize,
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    pub fn zero(rows: usize, cols: usize) -> Self {
        SparseMatrix {
            rows,
            cols,
            row_offsets: vec![0; rows + 1],
            col_indices: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Build from (row, col, value) triplets. Duplicate coordinates are an
    /// error; zero values are dropped so the no-explicit-zeros invariant
    /// holds by construction.
    pub fn from_triplets(
        rows: usize,
        cols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self> {
        let mut entries: Vec<(usize, usize, f64)> = triplets
            .into_iter()
            .filter(|&(_, _, v)| v != 0.0)
            .collect();
        entries.sort_by_key(|&(r, c, _)| (r, c));
        for pair in entries.windows(2) {
            if pair[0].0 == pair[1].0 && pair[0].1 == pair[1].1 {
                return Err(CopfError::Config(format!(
                    "duplicate sparse entry at ({}, {})",
                    pair[0].0, pair[0].1
                )));
            }
        }
        let mut row_offsets = vec![0usize; rows + 1];
        let mut col_indices = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        for &(r, c, v) in &entries {
            if r >= rows || c >= cols {
                return Err(CopfError::Config(format!(
                    "sparse entry ({r}, {c}) outside {rows}x{cols}"
                )));
            }
            row_offsets[r + 1] += 1;
            col_indices.push(c);
            values.push(v);
        }
        for r in 0..rows {
            row_offsets[r + 1] += row_offsets[r];
        }
        Ok(SparseMatrix { rows, cols, row_offsets, col_indices, values })
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix::from_triplets(n, n, (0..n).map(|i| (i, i, 1.0))).expect("identity")
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
        let (lo, hi) = (self.row_offsets[r], self.row_offsets[r + 1]);
        self.col_indices[lo..hi]
            .iter()
            .copied()
            .zip(self.values[lo..hi].iter().copied())
    }

    /// Structural invariants: monotone offsets, strictly increasing column
    /// indices per row, no stored zeros.
    pub fn check_invariants(&self) -> Result<()> {
        if self.row_offsets.len() != self.rows + 1
            || *self.row_offsets.last().unwrap() != self.values.len()
            || self.col_indices.len() != self.values.len()
        {
            return Err(CopfError::Numeric("csr index arrays inconsistent".into()));
        }
        for r in 0..self.rows {
            let (lo, hi) = (self.row_offsets[r], self.row_offsets[r + 1]);
            if lo > hi {
                return Err(CopfError::Numeric("csr offsets not monotone".into()));
            }
            for w in self.col_indices[lo..hi].windows(2) {
                if w[0] >= w[1] {
                    return Err(CopfError::Numeric(format!(
                        "csr columns not strictly increasing in row {r}"
                    )));
                }
            }
        }
        if self.values.iter().any(|&v| v == 0.0) {
            return Err(CopfError::Numeric("csr stores an explicit zero".into()));
        }
        Ok(())
    }

    /// Sparse-dense product. `self` is constant graph structure, so only the
    /// dense side is differentiable; the backward pass multiplies by the
    /// transpose (see `transpose`).
    pub fn spmm(&self, dense: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != dense.rows() {
            return Err(CopfError::Config(format!(
                "spmm: dimension mismatch, sparse {}x{} vs dense {}x{}",
                self.rows,
                self.cols,
                dense.rows(),
                dense.cols()
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, dense.cols());
        for r in 0..self.rows {
            let (lo, hi) = (self.row_offsets[r], self.row_offsets[r + 1]);
            for idx in lo..hi {
                let c = self.col_indices[idx];
                let v = self.values[idx];
                let src = dense.row(c);
                let dst = out.row_mut(r);
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                triplets.push((c, r, v));
            }
        }
        SparseMatrix::from_triplets(self.cols, self.rows, triplets).expect("transpose")
    }

    pub fn densify(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for (c, v) in self.row_entries(r) {
                out.set(r, c, v);
            }
        }
        out
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                let mut acc = 0.0;
                for (_, v) in self.row_entries(r) {
                    acc += v;
                }
                acc
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spmm_identity() {
        let a = SparseMatrix::identity(2);
        let b = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let c = a.spmm(&b).unwrap();
        assert_eq!(c.values(), b.values());
    }

    #[test]
    fn spmm_zero_matrix_annihilates() {
        let a = SparseMatrix::zero(2, 2);
        let b = DenseMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let c = a.spmm(&b).unwrap();
        assert!(c.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spmm_matches_dense_product() {
        // a = [[0, 1], [0.5, 0]]
        let a = SparseMatrix::from_triplets(2, 2, [(0, 1, 1.0), (1, 0, 0.5)]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let c = a.spmm(&b).unwrap();
        assert_eq!(c.values(), &[0.0, 2.0, 0.5, 0.0]);
        let dense = a.densify().matmul(&b).unwrap();
        assert!(c.bits_eq(&dense));
    }

    #[test]
    fn spmm_dimension_mismatch_reports_shapes() {
        let a = SparseMatrix::zero(2, 3);
        let b = DenseMatrix::zeros(2, 2);
        let err = a.spmm(&b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("2x2"), "{err}");
    }

    #[test]
    fn transpose_roundtrip() {
        let a = SparseMatrix::from_triplets(2, 3, [(0, 2, 1.5), (1, 0, -2.0)]).unwrap();
        let t = a.transpose();
        assert_eq!(t.rows(), 3);
        assert_eq!(t.cols(), 2);
        assert!(t.transpose().densify().bits_eq(&a.densify()));
        t.check_invariants().unwrap();
    }
}
