//! Small dense kernels: thin QR, sorted SVD, LU with a condition estimate.

use nalgebra::{DVector, SVD};

use crate::error::{Error, Result};
use crate::sparse::DenseBlock;

/// Orthonormal basis of the column space of `y` (thin Householder QR).
pub fn orthonormalize(y: &DenseBlock) -> DenseBlock {
    if y.ncols() == 0 {
        return DenseBlock::zeros(y.nrows(), 0);
    }
    y.clone().qr().q()
}

/// Thin SVD with singular values sorted in non-increasing order.
/// Returns `(u, sigma, v_t)`.
pub fn sorted_svd(m: &DenseBlock) -> (DenseBlock, DVector<f64>, DenseBlock) {
    let r = m.nrows().min(m.ncols());
    if r == 0 {
        return (
            DenseBlock::zeros(m.nrows(), 0),
            DVector::zeros(0),
            DenseBlock::zeros(0, m.ncols()),
        );
    }
    let svd = SVD::new(m.clone(), true, true);
    let u = svd.u.expect("requested");
    let v_t = svd.v_t.expect("requested");
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let u_sorted = DenseBlock::from_fn(u.nrows(), r, |i, j| u[(i, order[j])]);
    let vt_sorted = DenseBlock::from_fn(r, v_t.ncols(), |i, j| v_t[(order[i], j)]);
    let s_sorted = DVector::from_fn(r, |i, _| s[order[i]]);
    (u_sorted, s_sorted, vt_sorted)
}

/// Singular values in non-increasing order.
pub fn singular_values(m: &DenseBlock) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// 2-norm condition number.
pub fn cond2(m: &DenseBlock) -> f64 {
    let s = singular_values(m);
    match (s.first(), s.last()) {
        (Some(&max), Some(&min)) if min > 0.0 => max / min,
        (Some(_), Some(_)) => f64::INFINITY,
        _ => 1.0,
    }
}

pub fn norm1(m: &DenseBlock) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Dense LU of a small square matrix, kept for repeated solves.
#[derive(Debug, Clone)]
pub struct DenseLu {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    cond1: f64,
}

impl DenseLu {
    /// Factorizes `m` and computes its 1-norm condition number through the
    /// factors. Exactly singular input is an error.
    pub fn new(m: &DenseBlock) -> Result<Self> {
        let n = m.nrows();
        let lu = m.clone().lu();
        let inv = lu
            .solve(&DenseBlock::identity(n, n))
            .ok_or(Error::SingularBlock { col: 0 })?;
        let cond1 = if n == 0 { 1.0 } else { norm1(m) * norm1(&inv) };
        if !cond1.is_finite() {
            return Err(Error::SingularBlock { col: 0 });
        }
        Ok(Self { lu, cond1 })
    }

    pub fn cond1(&self) -> f64 {
        self.cond1
    }

    pub fn solve(&self, b: &DenseBlock) -> DenseBlock {
        if b.nrows() == 0 {
            return b.clone();
        }
        self.lu.solve(b).expect("factor checked nonsingular")
    }
}
