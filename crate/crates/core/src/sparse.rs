//! Compressed sparse row storage and the structural metrics used to judge
//! how well a matrix fits a banded SPIKE partitioning.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense multi-column block, column major. Holds right-hand sides,
/// solutions, spikes and the small dense factors.
pub type DenseBlock = DMatrix<f64>;

/// Sparse matrix in compressed row form.
///
/// Column indices are strictly increasing within each row and no entry is
/// stored twice. Explicit zeros are allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds a matrix from raw CSR arrays, checking every structural invariant.
    pub fn from_parts(
        n_rows: usize,
        n_cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_ptr.len() != n_rows + 1 {
            return Err(Error::InvalidCsr(format!(
                "row_ptr has length {}, expected {}",
                row_ptr.len(),
                n_rows + 1
            )));
        }
        if row_ptr[0] != 0 || row_ptr[n_rows] != col_idx.len() || col_idx.len() != values.len() {
            return Err(Error::InvalidCsr("row_ptr bounds disagree with nnz".into()));
        }
        for i in 0..n_rows {
            if row_ptr[i] > row_ptr[i + 1] {
                return Err(Error::InvalidCsr(format!("row_ptr decreases at row {i}")));
            }
            let cols = &col_idx[row_ptr[i]..row_ptr[i + 1]];
            if cols.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidCsr(format!(
                    "row {i}: column indices not strictly increasing"
                )));
            }
            if cols.last().is_some_and(|&c| c >= n_cols) {
                return Err(Error::InvalidCsr(format!(
                    "row {i}: column index out of range"
                )));
            }
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// Builds a matrix from (row, col, value) triplets. Duplicates are summed.
    pub fn from_triplets(
        n_rows: usize,
        n_cols: usize,
        triplets: &[(usize, usize, f64)],
    ) -> Result<Self> {
        for &(r, c, _) in triplets {
            if r >= n_rows || c >= n_cols {
                return Err(Error::InvalidCsr(format!(
                    "triplet ({r}, {c}) outside {n_rows}x{n_cols}"
                )));
            }
        }
        let mut counts = vec![0usize; n_rows + 1];
        for &(r, _, _) in triplets {
            counts[r + 1] += 1;
        }
        for i in 0..n_rows {
            counts[i + 1] += counts[i];
        }
        let mut next = counts.clone();
        let mut entries = vec![(0usize, 0.0f64); triplets.len()];
        for &(r, c, v) in triplets {
            entries[next[r]] = (c, v);
            next[r] += 1;
        }

        let mut row_ptr = Vec::with_capacity(n_rows + 1);
        let mut col_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        row_ptr.push(0);
        for i in 0..n_rows {
            let row = &mut entries[counts[i]..counts[i + 1]];
            // stable, so duplicates are summed in file order
            row.sort_by_key(|e| e.0);
            for &(c, v) in row.iter() {
                if col_idx.len() > row_ptr[i] && *col_idx.last().unwrap() == c {
                    *values.last_mut().unwrap() += v;
                } else {
                    col_idx.push(c);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Ok(Self {
            n_rows,
            n_cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            n_rows: n,
            n_cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn zeros(n_rows: usize, n_cols: usize) -> Self {
        Self {
            n_rows,
            n_cols,
            row_ptr: vec![0; n_rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Converts a dense matrix, dropping exact zeros.
    pub fn from_dense(m: &DenseBlock) -> Self {
        let mut trip = Vec::new();
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                if m[(i, j)] != 0.0 {
                    trip.push((i, j, m[(i, j)]));
                }
            }
        }
        Self::from_triplets(m.nrows(), m.ncols(), &trip).expect("in-range triplets")
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

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_square(&self) -> bool {
        self.n_rows == self.n_cols
    }

    /// Column indices and values of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.col_idx[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        match cols.binary_search(&j) {
            Ok(pos) => vals[pos],
            Err(_) => 0.0,
        }
    }

    /// Iterates over stored entries as (row, col, value).
    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |i| {
            let (cols, vals) = self.row(i);
            cols.iter().zip(vals).map(move |(&j, &v)| (i, j, v))
        })
    }

    pub fn transpose(&self) -> Self {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for j in 0..self.n_cols {
            counts[j + 1] += counts[j];
        }
        let mut next = counts.clone();
        let mut col_idx = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..self.n_rows {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                col_idx[next[j]] = i;
                values[next[j]] = v;
                next[j] += 1;
            }
        }
        Self {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            row_ptr: counts,
            col_idx,
            values,
        }
    }

    pub fn to_dense(&self) -> DenseBlock {
        let mut m = DenseBlock::zeros(self.n_rows, self.n_cols);
        for (i, j, v) in self.triplets() {
            m[(i, j)] = v;
        }
        m
    }

    /// The sub-matrix with rows `r0..r1` and columns `c0..c1`, re-indexed from zero.
    pub fn submatrix(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(r1 - r0 + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for i in r0..r1 {
            let (cols, vals) = self.row(i);
            let lo = cols.partition_point(|&c| c < c0);
            let hi = cols.partition_point(|&c| c < c1);
            col_idx.extend(cols[lo..hi].iter().map(|&c| c - c0));
            values.extend_from_slice(&vals[lo..hi]);
            row_ptr.push(col_idx.len());
        }
        Self {
            n_rows: r1 - r0,
            n_cols: c1 - c0,
            row_ptr,
            col_idx,
            values,
        }
    }

    /// Dense copy of the sub-matrix with rows `r0..r1` and columns `c0..c1`.
    pub fn dense_submatrix(&self, r0: usize, r1: usize, c0: usize, c1: usize) -> DenseBlock {
        let mut m = DenseBlock::zeros(r1 - r0, c1 - c0);
        for i in r0..r1 {
            let (cols, vals) = self.row(i);
            let lo = cols.partition_point(|&c| c < c0);
            let hi = cols.partition_point(|&c| c < c1);
            for (&j, &v) in cols[lo..hi].iter().zip(&vals[lo..hi]) {
                m[(i - r0, j - c0)] = v;
            }
        }
        m
    }

    /// `A * X`, or `A * X + Y` when `accumulate` is given.
    ///
    /// Each output entry sums its row in ascending column order.
    pub fn spmv(&self, x: &DenseBlock, accumulate: Option<&DenseBlock>) -> Result<DenseBlock> {
        if x.nrows() != self.n_cols {
            return Err(Error::DimensionMismatch {
                context: "spmv operand rows",
                expected: self.n_cols,
                got: x.nrows(),
            });
        }
        let mut y = match accumulate {
            Some(acc) => {
                if acc.nrows() != self.n_rows || acc.ncols() != x.ncols() {
                    return Err(Error::DimensionMismatch {
                        context: "spmv accumulator rows",
                        expected: self.n_rows,
                        got: acc.nrows(),
                    });
                }
                acc.clone()
            }
            None => DenseBlock::zeros(self.n_rows, x.ncols()),
        };
        for c in 0..x.ncols() {
            let xc = x.column(c);
            let mut yc = y.column_mut(c);
            for i in 0..self.n_rows {
                let (cols, vals) = self.row(i);
                let mut s = 0.0;
                for (&j, &v) in cols.iter().zip(vals) {
                    s += v * xc[j];
                }
                yc[i] += s;
            }
        }
        Ok(y)
    }

    /// Structural half-bandwidths, diagonal weight and band density.
    pub fn band_metrics(&self) -> Result<BandMetrics> {
        if !self.is_square() {
            return Err(Error::NotSquare {
                n_rows: self.n_rows,
                n_cols: self.n_cols,
            });
        }
        let mut ku = 0;
        let mut kl = 0;
        let mut diag = 0.0;
        let mut total = 0.0;
        for (i, j, v) in self.triplets() {
            if j > i {
                ku = ku.max(j - i);
            } else if i > j {
                kl = kl.max(i - j);
            } else {
                diag += v.abs();
            }
            total += v.abs();
        }
        let n = self.n_rows;
        let band = BandInfo {
            upper: ku,
            lower: kl,
            k: ku.max(kl),
        };
        Ok(BandMetrics {
            band,
            diag_weight: if total > 0.0 { diag / total } else { 0.0 },
            band_density: if n > 0 {
                self.nnz() as f64 / ((ku + kl + 1) * n) as f64
            } else {
                0.0
            },
        })
    }
}

/// Half-bandwidths of a square matrix; `k` is the larger of the two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandInfo {
    pub upper: usize,
    pub lower: usize,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandMetrics {
    pub band: BandInfo,
    /// Sum of |a_ii| over the sum of all |a_ij|.
    pub diag_weight: f64,
    /// nnz / ((ku + kl + 1) * n).
    pub band_density: f64,
}
