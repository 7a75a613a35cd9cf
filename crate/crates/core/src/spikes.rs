//! Spike matrices `T_i = A_i^{-1} [0; B_i]` and `W_i = A_i^{-1} [C_i; 0]`,
//! either formed explicitly or approximated by a randomized truncated SVD
//! that only touches the spike through block solves.

use nalgebra::{DMatrixView, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dense::{orthonormalize, sorted_svd};
use crate::error::{Error, Result};
use crate::lu::BlockFactor;
use crate::sparse::DenseBlock;

/// Relative threshold below which trailing singular values are treated as
/// numerically zero.
pub const RANK_COLLAPSE_TOL: f64 = 1e-14;

/// Which coupling a spike carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    /// `T_i`: coupling `B_i` to the next partition, padded at the bottom.
    Right,
    /// `W_i`: coupling `C_i` to the previous partition, padded at the top.
    Left,
}

/// Zero-pads a `k`-row block into an `n`-row block at the coupling's side.
pub fn pad_coupling(block: &DenseBlock, n: usize, side: Side) -> DenseBlock {
    let k = block.nrows();
    let mut out = DenseBlock::zeros(n, block.ncols());
    let start = match side {
        Side::Right => n - k,
        Side::Left => 0,
    };
    out.rows_mut(start, k).copy_from(block);
    out
}

/// First and last `k` rows.
fn tips(m: &DenseBlock, k: usize) -> Result<(DMatrixView<'_, f64>, DMatrixView<'_, f64>)> {
    let n = m.nrows();
    if k > n {
        return Err(Error::InvalidParameter(format!(
            "tip size {k} exceeds spike height {n}"
        )));
    }
    Ok((m.rows(0, k), m.rows(n - k, k)))
}

#[derive(Debug, Clone)]
pub struct FullSpike {
    pub values: DenseBlock,
    pub side: Side,
}

impl FullSpike {
    /// Solves `A_i S = pad(coupling)`.
    pub fn compute(factor: &BlockFactor, coupling: &DenseBlock, side: Side) -> Result<Self> {
        if factor.n() < coupling.nrows() {
            return Err(Error::InvalidParameter(format!(
                "block of size {} cannot carry a {}-row coupling",
                factor.n(),
                coupling.nrows()
            )));
        }
        let rhs = pad_coupling(coupling, factor.n(), side);
        Ok(Self {
            values: factor.solve(&rhs)?,
            side,
        })
    }

    /// `(top, bottom)` tips of height `k`.
    pub fn tips(&self, k: usize) -> Result<(DMatrixView<'_, f64>, DMatrixView<'_, f64>)> {
        tips(&self.values, k)
    }
}

/// Truncated SVD `u diag(sigma) v` of a spike. `u` is `n_i x r` with
/// orthonormal columns, `v` is `r x k` with orthonormal rows.
#[derive(Debug, Clone)]
pub struct LowRankSpike {
    pub u: DenseBlock,
    pub sigma: DVector<f64>,
    pub v: DenseBlock,
    pub side: Side,
    /// Set when fewer than the requested singular values were numerically
    /// nonzero and the rank was reduced.
    pub rank_collapsed: bool,
}

impl LowRankSpike {
    /// Rank-zero spike (the Block Jacobi limit).
    pub fn empty(n: usize, k: usize, side: Side) -> Self {
        Self {
            u: DenseBlock::zeros(n, 0),
            sigma: DVector::zeros(0),
            v: DenseBlock::zeros(0, k),
            side,
            rank_collapsed: false,
        }
    }

    /// Best rank-`r` approximation of an explicit spike via dense SVD.
    pub fn from_full(spike: &FullSpike, r: usize) -> Self {
        let (u, s, vt) = sorted_svd(&spike.values);
        Self::truncate(u, s, vt, r, spike.side)
    }

    fn truncate(u: DenseBlock, s: DVector<f64>, vt: DenseBlock, r: usize, side: Side) -> Self {
        let s_max = s.iter().copied().fold(0.0, f64::max);
        let numerical = s
            .iter()
            .take_while(|&&x| s_max > 0.0 && x >= RANK_COLLAPSE_TOL * s_max)
            .count();
        let keep = r.min(numerical);
        Self {
            u: u.columns(0, keep).into_owned(),
            sigma: s.rows(0, keep).into_owned(),
            v: vt.rows(0, keep).into_owned(),
            side,
            rank_collapsed: keep < r,
        }
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn n(&self) -> usize {
        self.u.nrows()
    }

    pub fn k(&self) -> usize {
        self.v.ncols()
    }

    pub fn to_dense(&self) -> DenseBlock {
        &self.u * DenseBlock::from_diagonal(&self.sigma) * &self.v
    }

    /// `(u_top, u_bottom)` tips of height `k`; `sigma` and `v` are shared.
    pub fn tips(&self, k: usize) -> Result<(DMatrixView<'_, f64>, DMatrixView<'_, f64>)> {
        tips(&self.u, k)
    }

    /// The compressed message `v x` sent in place of a `k`-row neighbour tip.
    pub fn compress(&self, x: &DMatrixView<'_, f64>) -> DenseBlock {
        &self.v * x
    }

    /// `u_rows diag(sigma) msg` for the rows `start..start + len` of `u`.
    pub fn expand_rows(&self, start: usize, len: usize, msg: &DenseBlock) -> DenseBlock {
        let mut scaled = msg.clone();
        for (mut row, &s) in scaled.row_iter_mut().zip(self.sigma.iter()) {
            row *= s;
        }
        self.u.rows(start, len) * scaled
    }
}

/// Configuration of the randomized range finder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SvdParams {
    pub n_svd: usize,
    pub oversample: usize,
    /// Applications of the spike or its transpose. Two is the basic
    /// range-finder; every further pair adds one power iteration.
    pub passes: usize,
}

impl SvdParams {
    /// Oversampling `ceil(n_svd / 2)` and two passes, clipped so that the
    /// sample count never exceeds `k`.
    pub fn with_defaults(n_svd: usize, k: usize) -> Self {
        Self {
            n_svd,
            oversample: n_svd.div_ceil(2).min(k.saturating_sub(n_svd)),
            passes: 2,
        }
    }
}

/// Independent random stream for one spike: derived from the run seed, the
/// partition index and the side.
pub fn spike_rng(seed: u64, partition: usize, side: Side) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side_bit = match side {
        Side::Right => 0,
        Side::Left => 1,
    };
    rng.set_stream(2 * partition as u64 + side_bit);
    rng
}

/// Matrix-free spike: applies `S` and `S^T` through block solves.
struct SpikeOperator<'a> {
    factor: &'a BlockFactor,
    coupling: &'a DenseBlock,
    side: Side,
}

impl SpikeOperator<'_> {
    fn k(&self) -> usize {
        self.coupling.nrows()
    }

    fn apply(&self, x: &DenseBlock) -> Result<DenseBlock> {
        let rhs = pad_coupling(&(self.coupling * x), self.factor.n(), self.side);
        self.factor.solve(&rhs)
    }

    fn apply_transpose(&self, y: &DenseBlock) -> Result<DenseBlock> {
        let z = self.factor.solve_adjoint(y)?;
        let n = self.factor.n();
        let k = self.k();
        let rows = match self.side {
            Side::Right => z.rows(n - k, k),
            Side::Left => z.rows(0, k),
        };
        Ok(self.coupling.transpose() * rows)
    }
}

/// Randomized truncated SVD of a spike using only block solves.
///
/// Draws a Gaussian `k x (n_svd + oversample)` test block, captures the
/// range of the spike, optionally sharpens it with power iterations, then
/// takes the dense SVD of the small projected matrix.
pub fn randomized_spike_svd(
    factor: &BlockFactor,
    coupling: &DenseBlock,
    side: Side,
    params: SvdParams,
    rng: &mut ChaCha8Rng,
) -> Result<LowRankSpike> {
    let k = coupling.nrows();
    if coupling.ncols() != k {
        return Err(Error::DimensionMismatch {
            context: "coupling block columns",
            expected: k,
            got: coupling.ncols(),
        });
    }
    let SvdParams {
        n_svd,
        oversample,
        passes,
    } = params;
    if n_svd == 0 || n_svd > k {
        return Err(Error::InvalidParameter(format!(
            "n_svd must be in 1..={k}, got {n_svd}"
        )));
    }
    if n_svd + oversample > k {
        return Err(Error::InvalidParameter(format!(
            "n_svd + oversample = {} exceeds k = {k}",
            n_svd + oversample
        )));
    }
    if passes < 2 {
        return Err(Error::InvalidParameter(
            "at least two passes are required".into(),
        ));
    }
    let op = SpikeOperator {
        factor,
        coupling,
        side,
    };
    let samples = n_svd + oversample;
    let omega = DenseBlock::from_fn(k, samples, |_, _| StandardNormal.sample(rng));

    let mut q = orthonormalize(&op.apply(&omega)?);
    for _ in 0..(passes - 2) / 2 {
        let z = orthonormalize(&op.apply_transpose(&q)?);
        q = orthonormalize(&op.apply(&z)?);
    }
    // B = Q^T S, formed as (S^T Q)^T
    let b = op.apply_transpose(&q)?.transpose();
    let (ub, s, vt) = sorted_svd(&b);
    let u = &q * ub;
    Ok(LowRankSpike::truncate(u, s, vt, n_svd, side))
}

/// The alternative construction that truncates the coupling instead of the
/// spike: `A_i^{-1} pad(svd_r(coupling))`.
pub fn coupling_svd_approximation(
    factor: &BlockFactor,
    coupling: &DenseBlock,
    side: Side,
    r: usize,
) -> Result<DenseBlock> {
    let (u, s, vt) = sorted_svd(coupling);
    let r = r.min(s.len());
    let approx =
        u.columns(0, r) * DenseBlock::from_diagonal(&s.rows(0, r).into_owned()) * vt.rows(0, r);
    factor.solve(&pad_coupling(&approx, factor.n(), side))
}
