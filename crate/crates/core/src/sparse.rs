//! Exact integer sparse matrices (CSR) used for every structural matrix.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Result};
use crate::scalar::Scalar;

/// Compressed sparse row matrix with `i64` entries.
///
/// Structural matrices only ever hold small integers (0, ±1, block sums), so
/// products and constraint checks are carried out exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<i64>,
}

impl IntMatrix {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            row_ptr: vec![0; nrows + 1],
            col_idx: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            nrows: n,
            ncols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            vals: vec![1; n],
        }
    }

    /// Builds from dense rows; every row must have `ncols` entries.
    pub fn from_rows(ncols: usize, rows: &[Vec<i64>]) -> Self {
        let mut b = Builder::new(ncols);
        for r in rows {
            assert_eq!(r.len(), ncols, "ragged row");
            b.push_row(r.iter().enumerate().filter(|(_, v)| **v != 0).map(|(j, v)| (j, *v)));
        }
        b.finish()
    }

    /// Builds from `(col, value)` lists, one per row. Zero values are dropped
    /// and columns are sorted.
    pub fn from_sparse_rows(ncols: usize, rows: Vec<Vec<(usize, i64)>>) -> Self {
        let mut b = Builder::new(ncols);
        for r in rows {
            b.push_row(r);
        }
        b.finish()
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, i64)> + '_ {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.col_idx[a..b].iter().copied().zip(self.vals[a..b].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> i64 {
        let (a, b) = (self.row_ptr[i], self.row_ptr[i + 1]);
        match self.col_idx[a..b].binary_search(&j) {
            Ok(p) => self.vals[a + p],
            Err(_) => 0,
        }
    }

    pub fn to_rows(&self) -> Vec<Vec<i64>> {
        (0..self.nrows)
            .map(|i| {
                let mut r = vec![0; self.ncols];
                for (j, v) in self.row(i) {
                    r[j] = v;
                }
                r
            })
            .collect()
    }

    pub fn to_dense<T: Scalar>(&self) -> DMatrix<T> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                d[(i, j)] = T::from_int(v);
            }
        }
        d
    }

    pub fn transpose(&self) -> Self {
        let mut rows: Vec<Vec<(usize, i64)>> = vec![Vec::new(); self.ncols];
        for i in 0..self.nrows {
            for (j, v) in self.row(i) {
                rows[j].push((i, v));
            }
        }
        Self::from_sparse_rows(self.nrows, rows)
    }

    pub fn is_zero(&self) -> bool {
        self.vals.iter().all(|v| *v == 0)
    }

    pub fn row_sums(&self) -> Vec<i64> {
        (0..self.nrows).map(|i| self.row(i).map(|(_, v)| v).sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<i64> {
        let mut s = vec![0; self.ncols];
        for (j, v) in self.col_idx.iter().zip(&self.vals) {
            s[*j] += v;
        }
        s
    }

    /// Exact product `self * rhs`.
    pub fn matmul(&self, rhs: &IntMatrix) -> Result<IntMatrix> {
        check_dim("integer matrix product", self.ncols, rhs.nrows)?;
        let mut b = Builder::new(rhs.ncols);
        let mut acc = vec![0i64; rhs.ncols];
        let mut touched = Vec::new();
        for i in 0..self.nrows {
            for (k, a) in self.row(i) {
                for (j, v) in rhs.row(k) {
                    if acc[j] == 0 {
                        touched.push(j);
                    }
                    acc[j] += a * v;
                }
            }
            touched.sort_unstable();
            touched.dedup();
            b.push_row(touched.iter().map(|&j| (j, acc[j])));
            for &j in &touched {
                acc[j] = 0;
            }
            touched.clear();
        }
        Ok(b.finish())
    }

    /// Kronecker product `self ⊗ rhs`.
    pub fn kron(&self, rhs: &IntMatrix) -> IntMatrix {
        let mut b = Builder::new(self.ncols * rhs.ncols);
        for i in 0..self.nrows {
            for r in 0..rhs.nrows {
                let row: Vec<(usize, i64)> = self
                    .row(i)
                    .flat_map(|(j, a)| rhs.row(r).map(move |(c, v)| (j * rhs.ncols + c, a * v)))
                    .collect();
                b.push_row(row);
            }
        }
        b.finish()
    }

    /// Stacks `blocks` vertically; all must share a column count.
    pub fn vstack(blocks: &[&IntMatrix]) -> IntMatrix {
        let ncols = blocks.first().map_or(0, |m| m.ncols);
        let mut b = Builder::new(ncols);
        for m in blocks {
            assert_eq!(m.ncols, ncols, "vstack column mismatch");
            for i in 0..m.nrows {
                b.push_row(m.row(i));
            }
        }
        b.finish()
    }

    /// Concatenates `blocks` horizontally; all must share a row count.
    pub fn hstack(blocks: &[&IntMatrix]) -> IntMatrix {
        let nrows = blocks.first().map_or(0, |m| m.nrows);
        let ncols: usize = blocks.iter().map(|m| m.ncols).sum();
        let mut b = Builder::new(ncols);
        for i in 0..nrows {
            let mut off = 0;
            let mut row = Vec::new();
            for m in blocks {
                assert_eq!(m.nrows, nrows, "hstack row mismatch");
                row.extend(m.row(i).map(|(j, v)| (j + off, v)));
                off += m.ncols;
            }
            b.push_row(row);
        }
        b.finish()
    }

    pub fn neg(&self) -> IntMatrix {
        let mut out = self.clone();
        out.vals.iter_mut().for_each(|v| *v = -*v);
        out
    }

    /// `self * x` in the scalar type `T`.
    pub fn mul_vec<T: Scalar>(&self, x: &[T]) -> Result<DVector<T>> {
        check_dim("sparse matrix-vector product", self.ncols, x.len())?;
        Ok(DVector::from_iterator(
            self.nrows,
            (0..self.nrows).map(|i| self.row(i).fold(T::zero(), |acc, (j, v)| acc + T::from_int(v) * x[j])),
        ))
    }

    /// `selfᵀ * x` in the scalar type `T`.
    pub fn tr_mul_vec<T: Scalar>(&self, x: &[T]) -> Result<DVector<T>> {
        check_dim("sparse transposed matrix-vector product", self.nrows, x.len())?;
        let mut out = DVector::zeros(self.ncols);
        for (i, xi) in x.iter().enumerate() {
            for (j, v) in self.row(i) {
                out[j] += T::from_int(v) * *xi;
            }
        }
        Ok(out)
    }

    /// `self * x` for integer vectors.
    pub fn mul_vec_exact(&self, x: &[i64]) -> Result<Vec<i64>> {
        check_dim("sparse matrix-vector product", self.ncols, x.len())?;
        Ok((0..self.nrows)
            .map(|i| self.row(i).map(|(j, v)| v * x[j]).sum())
            .collect())
    }

    /// `self * dense` where `dense` has `ncols` rows.
    pub fn mul_dense<T: Scalar>(&self, dense: &DMatrix<T>) -> Result<DMatrix<T>> {
        check_dim("sparse-dense product", self.ncols, dense.nrows())?;
        let mut out = DMatrix::zeros(self.nrows, dense.ncols());
        for i in 0..self.nrows {
            for (k, v) in self.row(i) {
                let vt = T::from_int(v);
                for c in 0..dense.ncols() {
                    out[(i, c)] += vt * dense[(k, c)];
                }
            }
        }
        Ok(out)
    }

    /// Reorders columns so that new column `j` is old column `perm[j]`.
    pub fn permute_cols(&self, perm: &[usize]) -> IntMatrix {
        assert_eq!(perm.len(), self.ncols);
        let mut inv = vec![0; perm.len()];
        for (new, old) in perm.iter().enumerate() {
            inv[*old] = new;
        }
        let rows = (0..self.nrows)
            .map(|i| self.row(i).map(|(j, v)| (inv[j], v)).collect())
            .collect();
        Self::from_sparse_rows(self.ncols, rows)
    }
}

struct Builder {
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<i64>,
}

impl Builder {
    fn new(ncols: usize) -> Self {
        Self {
            ncols,
            row_ptr: vec![0],
            col_idx: Vec::new(),
            vals: Vec::new(),
        }
    }

    fn push_row(&mut self, entries: impl IntoIterator<Item = (usize, i64)>) {
        let mut row: Vec<(usize, i64)> = entries.into_iter().collect();
        row.sort_unstable_by_key(|(j, _)| *j);
        let start = self.col_idx.len();
        for (j, v) in row {
            assert!(j < self.ncols, "column index out of range");
            if self.col_idx.len() > start && *self.col_idx.last().unwrap() == j {
                *self.vals.last_mut().unwrap() += v;
                if *self.vals.last().unwrap() == 0 {
                    self.vals.pop();
                    self.col_idx.pop();
                }
            } else if v != 0 {
                self.col_idx.push(j);
                self.vals.push(v);
            }
        }
        self.row_ptr.push(self.col_idx.len());
    }

    fn finish(self) -> IntMatrix {
        IntMatrix {
            nrows: self.row_ptr.len() - 1,
            ncols: self.ncols,
            row_ptr: self.row_ptr,
            col_idx: self.col_idx,
            vals: self.vals,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kron_matches_definition() {
        let a = IntMatrix::from_rows(2, &[vec![1, 2], vec![0, 1]]);
        let b = IntMatrix::from_rows(2, &[vec![0, 1], vec![1, 0]]);
        let k = a.kron(&b);
        assert_eq!(
            k.to_rows(),
            vec![vec![0, 1, 0, 2], vec![1, 0, 2, 0], vec![0, 0, 0, 1], vec![0, 0, 1, 0],]
        );
    }

    #[test]
    fn matmul_and_transpose() {
        let a = IntMatrix::from_rows(3, &[vec![1, -1, 0], vec![0, 2, 1]]);
        let at = a.transpose();
        let g = a.matmul(&at).unwrap();
        assert_eq!(g.to_rows(), vec![vec![2, -2], vec![-2, 5]]);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn stacking() {
        let i = IntMatrix::identity(2);
        let z = IntMatrix::zeros(2, 1);
        assert_eq!(
            IntMatrix::hstack(&[&i, &z]).to_rows(),
            vec![vec![1, 0, 0], vec![0, 1, 0]]
        );
        assert_eq!(IntMatrix::vstack(&[&i, &i.neg()]).row_sums(), vec![1, 1, -1, -1]);
    }

    #[test]
    fn cancelling_entries_are_dropped() {
        let m = IntMatrix::from_sparse_rows(2, vec![vec![(1, 1), (1, -1), (0, 3)]]);
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.get(0, 0), 3);
    }
}
