//! Compressed sparse row matrices.

use std::ops::Range;

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("entry ({row}, {col}) outside a {nrows}x{ncols} matrix")]
    OutOfBounds {
        row: usize,
        col: usize,
        nrows: usize,
        ncols: usize,
    },
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
}

/// CSR matrix with sorted, unique column indices in each row.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets. Duplicate positions are summed.
    pub fn from_triplets(
        nrows: usize,
        ncols: usize,
        triplets: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self, SparseError> {
        let mut entries: Vec<(usize, usize, f64)> = triplets.into_iter().collect();
        for &(row, col, v) in &entries {
            if row >= nrows || col >= ncols {
                return Err(SparseError::OutOfBounds {
                    row,
                    col,
                    nrows,
                    ncols,
                });
            }
            if !v.is_finite() {
                return Err(SparseError::NonFinite { row, col });
            }
        }
        entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut indptr = vec![0; nrows + 1];
        let mut indices = Vec::with_capacity(entries.len());
        let mut values: Vec<f64> = Vec::with_capacity(entries.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in entries {
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for i in 0..nrows {
            indptr[i + 1] += indptr[i];
        }
        Ok(SparseMatrix {
            nrows,
            ncols,
            indptr,
            indices,
            values,
        })
    }

    /// Builds from per-row sorted `(col, value)` lists.
    pub(crate) fn from_sorted_rows(ncols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        indptr.push(0);
        let nnz = rows.iter().map(Vec::len).sum();
        let mut indices = Vec::with_capacity(nnz);
        let mut values = Vec::with_capacity(nnz);
        for row in &rows {
            debug_assert!(row.windows(2).all(|w| w[0].0 < w[1].0));
            for &(c, v) in row {
                indices.push(c);
                values.push(v);
            }
            indptr.push(indices.len());
        }
        SparseMatrix {
            nrows: rows.len(),
            ncols,
            indptr,
            indices,
            values,
        }
    }

    pub fn identity(n: usize) -> Self {
        SparseMatrix {
            nrows: n,
            ncols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// An `nrows × ncols` matrix with no stored entries.
    pub fn empty(nrows: usize, ncols: usize) -> Self {
        SparseMatrix {
            nrows,
            ncols,
            indptr: vec![0; nrows + 1],
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
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

    pub fn row_range(&self, row: usize) -> Range<usize> {
        self.indptr[row]..self.indptr[row + 1]
    }

    pub fn row_indices(&self, row: usize) -> &[usize] {
        &self.indices[self.row_range(row)]
    }

    pub fn row_values(&self, row: usize) -> &[f64] {
        &self.values[self.row_range(row)]
    }

    pub fn get(&self, row: usize, col: usize) -> Option<f64> {
        let cols = self.row_indices(row);
        cols.binary_search(&col)
            .ok()
            .map(|k| self.values[self.indptr[row] + k])
    }

    /// Same sparsity pattern with new values (one per stored entry).
    pub fn with_values(&self, values: Vec<f64>) -> SparseMatrix {
        assert_eq!(values.len(), self.nnz(), "value count must match nnz");
        SparseMatrix {
            values,
            ..self.clone()
        }
    }

    pub fn transpose(&self) -> SparseMatrix {
        let mut counts = vec![0usize; self.ncols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for j in 0..self.ncols {
            counts[j + 1] += counts[j];
        }
        let indptr = counts.clone();
        let mut next = counts;
        let mut indices = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        // rows are visited in increasing order, so each transposed row ends up sorted
        for r in 0..self.nrows {
            for k in self.row_range(r) {
                let c = self.indices[k];
                let dst = next[c];
                indices[dst] = r;
                values[dst] = self.values[k];
                next[c] += 1;
            }
        }
        SparseMatrix {
            nrows: self.ncols,
            ncols: self.nrows,
            indptr,
            indices,
            values,
        }
    }

    /// `self · x` for a row-major dense `x` with `cols` columns.
    pub fn mul_dense(&self, x: &[f64], cols: usize) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols * cols, "dense operand shape");
        let mut out = vec![0.0; self.nrows * cols];
        if cols == 0 {
            return out;
        }
        let kernel = |(i, row): (usize, &mut [f64])| {
            for k in self.row_range(i) {
                let v = self.values[k];
                let src = &x[self.indices[k] * cols..(self.indices[k] + 1) * cols];
                for (o, s) in row.iter_mut().zip(src) {
                    *o += v * s;
                }
            }
        };
        if self.nnz() * cols >= 1 << 15 {
            out.par_chunks_mut(cols).enumerate().for_each(kernel);
        } else {
            out.chunks_mut(cols).enumerate().for_each(kernel);
        }
        out
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.ncols]; self.nrows];
        for (r, row) in out.iter_mut().enumerate() {
            for k in self.row_range(r) {
                row[self.indices[k]] = self.values[k];
            }
        }
        out
    }

    /// Largest `|M − Mᵀ|` over all positions.
    pub fn asymmetry(&self) -> f64 {
        let t = self.transpose();
        if t.indptr != self.indptr || t.indices != self.indices {
            // patterns differ: compare densely on the union
            let (a, b) = (self.to_dense(), t.to_dense());
            return a
                .iter()
                .flatten()
                .zip(b.iter().flatten())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
        }
        self.values
            .iter()
            .zip(&t.values)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_sort_and_merge() {
        let m =
            SparseMatrix::from_triplets(2, 3, [(1, 2, 1.0), (0, 1, 2.0), (1, 0, 3.0), (1, 2, 0.5)])
                .unwrap();
        assert_eq!(m.indptr(), &[0, 1, 3]);
        assert_eq!(m.indices(), &[1, 0, 2]);
        assert_eq!(m.values(), &[2.0, 3.0, 1.5]);
        assert_eq!(m.get(1, 2), Some(1.5));
        assert_eq!(m.get(0, 0), None);
    }

    #[test]
    fn triplets_validate() {
        assert!(matches!(
            SparseMatrix::from_triplets(2, 2, [(2, 0, 1.0)]),
            Err(SparseError::OutOfBounds { row: 2, .. })
        ));
        assert!(matches!(
            SparseMatrix::from_triplets(2, 2, [(0, 0, f64::NAN)]),
            Err(SparseError::NonFinite { .. })
        ));
    }

    #[test]
    fn transpose_round_trip() {
        let m =
            SparseMatrix::from_triplets(3, 4, [(0, 3, 1.0), (2, 0, 2.0), (1, 1, 3.0), (2, 3, 4.0)])
                .unwrap();
        let t = m.transpose();
        assert_eq!(t.nrows(), 4);
        assert_eq!(t.get(3, 2), Some(4.0));
        assert_eq!(t.transpose(), m);
    }

    #[test]
    fn identity_times_dense() {
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        assert_eq!(SparseMatrix::identity(3).mul_dense(&x, 2), x);
    }
}
