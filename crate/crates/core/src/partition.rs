//! Block-tridiagonal partitioning.
//!
//! Partition `i` owns rows `offsets[i]..offsets[i] + sizes[i]`. Its coupling
//! to the next partition is the `k x k` block `B_i` in the bottom-left corner
//! of the super-diagonal block, and its coupling to the previous one is `C_i`
//! in the top-right corner of the sub-diagonal block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{CsrMatrix, DenseBlock};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionLayout {
    sizes: Vec<usize>,
    offsets: Vec<usize>,
    k: usize,
}

impl PartitionLayout {
    /// Balanced layout: the first `n mod p` partitions get one extra row.
    pub fn new(n: usize, p: usize, k: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::InvalidParameter(
                "partition count must be at least 1".into(),
            ));
        }
        let min_n = p * (k + 1);
        // p = 1 has no interfaces, so only n > 0 (or n > k for consistency) matters
        if n < min_n {
            return Err(Error::LayoutInfeasible { n, p, k, min_n });
        }
        let base = n / p;
        let extra = n % p;
        let sizes: Vec<usize> = (0..p).map(|i| base + usize::from(i < extra)).collect();
        let mut offsets = Vec::with_capacity(p);
        let mut acc = 0;
        for &s in &sizes {
            offsets.push(acc);
            acc += s;
        }
        Ok(Self { sizes, offsets, k })
    }

    pub fn p(&self) -> usize {
        self.sizes.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn size(&self, i: usize) -> usize {
        self.sizes[i]
    }

    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    /// Number of interfaces between adjacent partitions.
    pub fn interfaces(&self) -> usize {
        self.p() - 1
    }

    /// Rows of `x` owned by partition `i`.
    pub fn slice<'a>(&self, x: &'a DenseBlock, i: usize) -> nalgebra::DMatrixView<'a, f64> {
        x.rows(self.offsets[i], self.sizes[i])
    }

    pub fn partition_of(&self, row: usize) -> usize {
        self.offsets.partition_point(|&o| o <= row) - 1
    }
}

/// Diagonal blocks and corner couplings of a block-tridiagonal matrix.
#[derive(Debug, Clone)]
pub struct PartitionBlocks {
    pub layout: PartitionLayout,
    /// `A_i`, one per partition.
    pub diag: Vec<CsrMatrix>,
    /// `B_i`, coupling partition `i` to `i + 1`; one per interface.
    pub upper: Vec<DenseBlock>,
    /// `C_{i+1}`, coupling partition `i + 1` to `i`; one per interface.
    pub lower: Vec<DenseBlock>,
}

impl PartitionBlocks {
    /// Splits `a` under `layout`, failing on any entry outside the
    /// block-tridiagonal corner pattern.
    pub fn extract(a: &CsrMatrix, layout: &PartitionLayout) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::NotSquare {
                n_rows: a.n_rows(),
                n_cols: a.n_cols(),
            });
        }
        if a.n_rows() != layout.n() {
            return Err(Error::DimensionMismatch {
                context: "partition layout size",
                expected: layout.n(),
                got: a.n_rows(),
            });
        }
        let k = layout.k();
        let p = layout.p();
        for (i, j, v) in a.triplets() {
            if v == 0.0 {
                continue;
            }
            let pi = layout.partition_of(i);
            let pj = layout.partition_of(j);
            let ok = if pi == pj {
                true
            } else if pj == pi + 1 {
                // bottom k rows of partition pi, first k columns of pj
                i >= layout.offset(pi) + layout.size(pi) - k && j < layout.offset(pj) + k
            } else if pi == pj + 1 {
                i < layout.offset(pi) + k && j >= layout.offset(pj) + layout.size(pj) - k
            } else {
                false
            };
            if !ok {
                return Err(Error::NotBlockTridiagonal { row: i, col: j });
            }
        }

        let diag = (0..p)
            .map(|i| {
                let (o, s) = (layout.offset(i), layout.size(i));
                a.submatrix(o, o + s, o, o + s)
            })
            .collect();
        let mut upper = Vec::with_capacity(p.saturating_sub(1));
        let mut lower = Vec::with_capacity(p.saturating_sub(1));
        for i in 0..p.saturating_sub(1) {
            let end_i = layout.offset(i) + layout.size(i);
            let start_next = layout.offset(i + 1);
            upper.push(a.dense_submatrix(end_i - k, end_i, start_next, start_next + k));
            lower.push(a.dense_submatrix(start_next, start_next + k, end_i - k, end_i));
        }
        Ok(Self {
            layout: layout.clone(),
            diag,
            upper,
            lower,
        })
    }

    /// Reassembles the full matrix from its blocks.
    pub fn assemble(&self) -> CsrMatrix {
        let l = &self.layout;
        let k = l.k();
        let mut trip = Vec::new();
        for (i, d) in self.diag.iter().enumerate() {
            let o = l.offset(i);
            trip.extend(d.triplets().map(|(r, c, v)| (r + o, c + o, v)));
        }
        for i in 0..l.interfaces() {
            let end_i = l.offset(i) + l.size(i);
            let start_next = l.offset(i + 1);
            for r in 0..k {
                for c in 0..k {
                    let b = self.upper[i][(r, c)];
                    if b != 0.0 {
                        trip.push((end_i - k + r, start_next + c, b));
                    }
                    let cc = self.lower[i][(r, c)];
                    if cc != 0.0 {
                        trip.push((start_next + r, end_i - k + c, cc));
                    }
                }
            }
        }
        CsrMatrix::from_triplets(l.n(), l.n(), &trip).expect("blocks lie inside the layout")
    }
}
