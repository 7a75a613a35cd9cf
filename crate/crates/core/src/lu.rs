//! Sparse LU with partial pivoting for the per-partition diagonal blocks.
//!
//! Left-looking (Gilbert-Peierls): column `j` of `L` and `U` is obtained by
//! a sparse triangular solve with the columns already computed, whose
//! nonzero pattern comes from a depth-first reach in the graph of `L`.
//! The pivot of each column is its largest remaining entry in magnitude,
//! ties going to the smallest row index.

use crate::error::{Error, Result};
use crate::reorder::{apply_permutation, rcm_ordering, Permutation};
use crate::sparse::{CsrMatrix, DenseBlock};

#[derive(Debug, Clone, Copy, Default)]
pub struct LuOptions {
    /// Symmetrically reorder the block with RCM before factorizing.
    pub preorder: bool,
}

/// Column-compressed triangular factor.
#[derive(Debug, Clone, Default)]
struct CscFactor {
    col_ptr: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl CscFactor {
    fn col(&self, j: usize) -> (&[usize], &[f64]) {
        let r = self.col_ptr[j]..self.col_ptr[j + 1];
        (&self.idx[r.clone()], &self.val[r])
    }
}

/// `P A = L U` for one diagonal block. Immutable once built; solves take
/// `&self` and may run concurrently.
#[derive(Debug, Clone)]
pub struct BlockFactor {
    n: usize,
    /// Strictly lower part; row indices are original block rows.
    l: CscFactor,
    /// Upper part without the diagonal; row indices are pivot steps.
    u: CscFactor,
    u_diag: Vec<f64>,
    /// `pivot_row[step]` = original row chosen at that step.
    pivot_row: Vec<usize>,
    /// `pivot_step[row]` = step at which `row` was chosen.
    pivot_step: Vec<usize>,
    preorder: Option<Permutation>,
}

impl BlockFactor {
    pub fn factorize(a: &CsrMatrix) -> Result<Self> {
        Self::factorize_with(a, LuOptions::default())
    }

    pub fn factorize_with(a: &CsrMatrix, opts: LuOptions) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::NotSquare {
                n_rows: a.n_rows(),
                n_cols: a.n_cols(),
            });
        }
        if opts.preorder {
            let perm = rcm_ordering(a)?;
            let b = apply_permutation(a, &perm, &perm)?;
            let mut f = Self::factorize_natural(&b).map_err(|e| match e {
                Error::SingularBlock { col } => Error::SingularBlock {
                    col: perm.source(col),
                },
                other => other,
            })?;
            f.preorder = Some(perm);
            Ok(f)
        } else {
            Self::factorize_natural(a)
        }
    }

    fn factorize_natural(a: &CsrMatrix) -> Result<Self> {
        let n = a.n_rows();
        // column access to A
        let at = a.transpose();

        let mut l = CscFactor {
            col_ptr: vec![0],
            ..Default::default()
        };
        let mut u = CscFactor {
            col_ptr: vec![0],
            ..Default::default()
        };
        let mut u_diag = Vec::with_capacity(n);
        let mut pivot_row = Vec::with_capacity(n);
        let mut pivot_step = vec![usize::MAX; n];

        let mut x = vec![0.0f64; n];
        let mut mark = vec![usize::MAX; n];
        let mut pattern: Vec<usize> = Vec::with_capacity(n);
        let mut topo: Vec<usize> = Vec::with_capacity(n);
        let mut stack: Vec<(usize, usize)> = Vec::new();

        for j in 0..n {
            let (rows, vals) = at.row(j);
            pattern.clear();
            topo.clear();

            // Reach of A[:, j] in the graph of L: pivotal rows are expanded
            // through the column of L they were pivoted at.
            for &r0 in rows {
                if mark[r0] == j {
                    continue;
                }
                mark[r0] = j;
                stack.push((r0, 0));
                while let Some(top) = stack.len().checked_sub(1) {
                    let (r, mut child) = stack[top];
                    let step = pivot_step[r];
                    let mut next_row = None;
                    if step != usize::MAX {
                        let (lrows, _) = l.col(step);
                        while child < lrows.len() {
                            let next = lrows[child];
                            child += 1;
                            if mark[next] != j {
                                next_row = Some(next);
                                break;
                            }
                        }
                    }
                    stack[top].1 = child;
                    match next_row {
                        Some(next) => {
                            mark[next] = j;
                            stack.push((next, 0));
                        }
                        None => {
                            stack.pop();
                            topo.push(r);
                        }
                    }
                }
            }
            // topo is in reverse topological order
            for (&r, &v) in rows.iter().zip(vals) {
                x[r] = v;
            }
            for &r in topo.iter().rev() {
                let step = pivot_step[r];
                if step == usize::MAX {
                    continue;
                }
                let xr = x[r];
                if xr != 0.0 {
                    let (lrows, lvals) = l.col(step);
                    for (&lr, &lv) in lrows.iter().zip(lvals) {
                        x[lr] -= lv * xr;
                    }
                }
            }
            pattern.extend_from_slice(&topo);

            // partial pivoting over non-pivotal rows
            let mut piv: Option<usize> = None;
            let mut best = 0.0f64;
            for &r in &pattern {
                if pivot_step[r] == usize::MAX {
                    let m = x[r].abs();
                    if m > best || (m == best && m > 0.0 && piv.is_some_and(|p| r < p)) {
                        best = m;
                        piv = Some(r);
                    }
                }
            }
            let Some(prow) = piv else {
                return Err(Error::SingularBlock { col: j });
            };
            let pval = x[prow];

            let mut ucol: Vec<(usize, f64)> = Vec::new();
            for &r in &pattern {
                let step = pivot_step[r];
                if step != usize::MAX {
                    if x[r] != 0.0 {
                        ucol.push((step, x[r]));
                    }
                } else if r != prow && x[r] != 0.0 {
                    l.idx.push(r);
                    l.val.push(x[r] / pval);
                }
                x[r] = 0.0;
            }
            ucol.sort_unstable_by_key(|e| e.0);
            for (s, v) in ucol {
                u.idx.push(s);
                u.val.push(v);
            }
            l.col_ptr.push(l.idx.len());
            u.col_ptr.push(u.idx.len());
            u_diag.push(pval);
            pivot_step[prow] = j;
            pivot_row.push(prow);
        }

        Ok(Self {
            n,
            l,
            u,
            u_diag,
            pivot_row,
            pivot_step,
            preorder: None,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Stored entries of `L` and `U`, counting the unit diagonal of `L` once.
    pub fn fill(&self) -> usize {
        self.l.idx.len() + self.u.idx.len() + self.n
    }

    fn solve_in_place(&self, b: &mut [f64], work: &mut [f64]) {
        let n = self.n;
        // forward with L, accumulating the pivoted right-hand side in `work`
        for step in 0..n {
            let yv = b[self.pivot_row[step]];
            work[step] = yv;
            if yv != 0.0 {
                let (rows, vals) = self.l.col(step);
                for (&r, &v) in rows.iter().zip(vals) {
                    b[r] -= v * yv;
                }
            }
        }
        // backward with U, result indexed by column
        for c in (0..n).rev() {
            let z = work[c] / self.u_diag[c];
            work[c] = z;
            if z != 0.0 {
                let (rows, vals) = self.u.col(c);
                for (&s, &v) in rows.iter().zip(vals) {
                    work[s] -= v * z;
                }
            }
        }
        b.copy_from_slice(work);
    }

    fn solve_transpose_in_place(&self, b: &mut [f64], work: &mut [f64]) {
        let n = self.n;
        // U^T w = b
        for c in 0..n {
            let (rows, vals) = self.u.col(c);
            let mut s = b[c];
            for (&i, &v) in rows.iter().zip(vals) {
                s -= v * work[i];
            }
            work[c] = s / self.u_diag[c];
        }
        // L^T v = w, in pivot order
        for step in (0..n).rev() {
            let (rows, vals) = self.l.col(step);
            let mut s = work[step];
            for (&r, &v) in rows.iter().zip(vals) {
                s -= v * work[self.pivot_step[r]];
            }
            work[step] = s;
        }
        for step in 0..n {
            b[self.pivot_row[step]] = work[step];
        }
    }

    fn solve_impl(&self, rhs: &DenseBlock, transpose: bool) -> Result<DenseBlock> {
        if rhs.nrows() != self.n {
            return Err(Error::DimensionMismatch {
                context: "block solve right-hand side",
                expected: self.n,
                got: rhs.nrows(),
            });
        }
        let mut out = match &self.preorder {
            Some(p) => p.permute_rows(rhs),
            None => rhs.clone(),
        };
        let mut work = vec![0.0; self.n];
        for mut col in out.column_iter_mut() {
            let b = col.as_mut_slice();
            if transpose {
                self.solve_transpose_in_place(b, &mut work);
            } else {
                self.solve_in_place(b, &mut work);
            }
        }
        Ok(match &self.preorder {
            Some(p) => p.unpermute_rows(&out),
            None => out,
        })
    }

    /// `A_i^{-1} rhs`, column by column.
    pub fn solve(&self, rhs: &DenseBlock) -> Result<DenseBlock> {
        self.solve_impl(rhs, false)
    }

    /// `A_i^{-T} rhs`.
    pub fn solve_adjoint(&self, rhs: &DenseBlock) -> Result<DenseBlock> {
        self.solve_impl(rhs, true)
    }
}
