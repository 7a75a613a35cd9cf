//! The `2kp x 2kp` reduced system over spike tips.
//!
//! Three ways to multiply by it (explicit tips, low-rank spikes with
//! compressed neighbour messages, and on-the-fly block solves) and the
//! truncated block-diagonal preconditioner, whose `2k x 2k` interface blocks
//! are inverted through a Woodbury identity at size `n_svd`.
//!
//! Partition `i` owns rows `2ki..2ki + k` (its top tip) and
//! `2ki + k..2k(i + 1)` (its bottom tip). All cross-partition data moves as
//! messages recorded in a [`CommLedger`].

use nalgebra::{DMatrixView, DVector};

use crate::dense::{norm1, DenseLu};
use crate::error::{Error, Result};
use crate::ledger::{CommLedger, Stage};
use crate::lu::BlockFactor;
use crate::parallel::{map_partitions, try_map_partitions, Schedule};
use crate::partition::{PartitionBlocks, PartitionLayout};
use crate::sparse::DenseBlock;
use crate::spikes::{pad_coupling, FullSpike, LowRankSpike, Side};

/// Interfaces whose Woodbury factors are worse conditioned than this are
/// rejected.
pub const INTERFACE_COND_LIMIT: f64 = 1e12;

/// Reduced-space block vector: a top and a bottom tip per partition.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedVector {
    p: usize,
    k: usize,
    data: DenseBlock,
}

impl ReducedVector {
    pub fn zeros(p: usize, k: usize, ncols: usize) -> Self {
        Self {
            p,
            k,
            data: DenseBlock::zeros(2 * k * p, ncols),
        }
    }

    pub fn from_block(p: usize, k: usize, data: DenseBlock) -> Result<Self> {
        if data.nrows() != 2 * k * p {
            return Err(Error::DimensionMismatch {
                context: "reduced vector rows",
                expected: 2 * k * p,
                got: data.nrows(),
            });
        }
        Ok(Self { p, k, data })
    }

    /// Assembles from per-partition `(top, bottom)` pairs.
    pub fn from_parts(k: usize, ncols: usize, parts: Vec<(DenseBlock, DenseBlock)>) -> Self {
        let p = parts.len();
        let mut v = Self::zeros(p, k, ncols);
        for (i, (t, b)) in parts.into_iter().enumerate() {
            v.data.rows_mut(2 * k * i, k).copy_from(&t);
            v.data.rows_mut(2 * k * i + k, k).copy_from(&b);
        }
        v
    }

    /// Tips of a full-length vector under `layout`.
    pub fn gather(layout: &PartitionLayout, y: &DenseBlock) -> Self {
        let k = layout.k();
        let parts = (0..layout.p())
            .map(|i| {
                let o = layout.offset(i);
                let s = layout.size(i);
                (y.rows(o, k).into_owned(), y.rows(o + s - k, k).into_owned())
            })
            .collect();
        Self::from_parts(k, y.ncols(), parts)
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    pub fn top(&self, i: usize) -> DMatrixView<'_, f64> {
        self.data.rows(2 * self.k * i, self.k)
    }

    pub fn bottom(&self, i: usize) -> DMatrixView<'_, f64> {
        self.data.rows(2 * self.k * i + self.k, self.k)
    }

    pub fn as_block(&self) -> &DenseBlock {
        &self.data
    }

    pub fn into_block(self) -> DenseBlock {
        self.data
    }
}

/// Per-interface spike pair: `t[j]` is `T_j` of partition `j` and `w[j]` is
/// `W_{j+1}` of partition `j + 1`.
#[derive(Debug, Clone)]
pub struct InterfaceSpikes<S> {
    pub t: Vec<S>,
    pub w: Vec<S>,
}

impl<S> InterfaceSpikes<S> {
    pub fn interfaces(&self) -> usize {
        self.t.len()
    }

    fn check(&self, x: &ReducedVector) -> Result<()> {
        if self.t.len() != self.w.len() || self.t.len() + 1 != x.p() {
            return Err(Error::DimensionMismatch {
                context: "interface count",
                expected: x.p().saturating_sub(1),
                got: self.t.len(),
            });
        }
        Ok(())
    }
}

impl InterfaceSpikes<FullSpike> {
    /// Explicit spikes for every interface.
    pub fn compute_full(
        blocks: &PartitionBlocks,
        factors: &[BlockFactor],
        schedule: Schedule,
    ) -> Result<Self> {
        let m = blocks.layout.interfaces();
        let t = try_map_partitions(schedule, m, |j| {
            FullSpike::compute(&factors[j], &blocks.upper[j], Side::Right)
        })?;
        let w = try_map_partitions(schedule, m, |j| {
            FullSpike::compute(&factors[j + 1], &blocks.lower[j], Side::Left)
        })?;
        Ok(Self { t, w })
    }

    /// Best rank-`r` truncation of every spike (dense SVD).
    pub fn truncated(&self, r: usize) -> InterfaceSpikes<LowRankSpike> {
        InterfaceSpikes {
            t: self
                .t
                .iter()
                .map(|s| LowRankSpike::from_full(s, r))
                .collect(),
            w: self
                .w
                .iter()
                .map(|s| LowRankSpike::from_full(s, r))
                .collect(),
        }
    }
}

fn tip_rows(n: usize, k: usize) -> [(usize, usize); 2] {
    [(0, k), (n - k, k)]
}

/// Exact product with explicit spike tips.
pub fn matvec_exact(
    spikes: &InterfaceSpikes<FullSpike>,
    x: &ReducedVector,
    ledger: &CommLedger,
    schedule: Schedule,
) -> Result<ReducedVector> {
    spikes.check(x)?;
    let (p, k, nc) = (x.p(), x.k(), x.ncols());
    for _ in 0..2 * (p - 1) {
        ledger.record(Stage::ReducedMatvec, k * nc);
    }
    let parts = try_map_partitions(schedule, p, |i| -> Result<_> {
        let mut top = x.top(i).into_owned();
        let mut bot = x.bottom(i).into_owned();
        if i > 0 {
            let w = &spikes.w[i - 1];
            let (wt, wb) = w.tips(k)?;
            let prev = x.bottom(i - 1);
            top += wt * prev;
            bot += wb * prev;
        }
        if i + 1 < p {
            let t = &spikes.t[i];
            let (tt, tb) = t.tips(k)?;
            let next = x.top(i + 1);
            top += tt * next;
            bot += tb * next;
        }
        Ok((top, bot))
    })?;
    Ok(ReducedVector::from_parts(k, nc, parts))
}

/// Product with the low-rank reduced system. Each neighbour tip is
/// compressed by the receiver's `v` before it is sent, so messages carry
/// `rank x n_rhs` scalars.
pub fn matvec_lowrank(
    spikes: &InterfaceSpikes<LowRankSpike>,
    x: &ReducedVector,
    ledger: &CommLedger,
    schedule: Schedule,
) -> Result<ReducedVector> {
    spikes.check(x)?;
    let (p, k, nc) = (x.p(), x.k(), x.ncols());
    // message j -> j+1: v_{W_{j+1}} x_{j,b};  j+1 -> j: v_{T_j} x_{j+1,t}
    let msgs = map_partitions(schedule, p - 1, |j| {
        let down = (spikes.w[j].rank() > 0).then(|| spikes.w[j].compress(&x.bottom(j)));
        let up = (spikes.t[j].rank() > 0).then(|| spikes.t[j].compress(&x.top(j + 1)));
        (down, up)
    });
    for (down, up) in &msgs {
        for m in [down, up].into_iter().flatten() {
            ledger.record(Stage::ReducedMatvec, m.len());
        }
    }
    let parts = map_partitions(schedule, p, |i| {
        let mut top = x.top(i).into_owned();
        let mut bot = x.bottom(i).into_owned();
        if i > 0 {
            if let Some(m) = &msgs[i - 1].0 {
                let w = &spikes.w[i - 1];
                let [(t0, tl), (b0, bl)] = tip_rows(w.n(), k);
                top += w.expand_rows(t0, tl, m);
                bot += w.expand_rows(b0, bl, m);
            }
        }
        if i + 1 < p {
            if let Some(m) = &msgs[i].1 {
                let t = &spikes.t[i];
                let [(t0, tl), (b0, bl)] = tip_rows(t.n(), k);
                top += t.expand_rows(t0, tl, m);
                bot += t.expand_rows(b0, bl, m);
            }
        }
        (top, bot)
    });
    Ok(ReducedVector::from_parts(k, nc, parts))
}

/// Product with the true reduced system without forming any spike: each
/// partition pads its couplings times the received neighbour tips, does one
/// block solve and keeps the first and last `k` rows.
pub fn matvec_otf(
    blocks: &PartitionBlocks,
    factors: &[BlockFactor],
    x: &ReducedVector,
    ledger: &CommLedger,
    schedule: Schedule,
) -> Result<ReducedVector> {
    let (p, k, nc) = (x.p(), x.k(), x.ncols());
    if blocks.layout.p() != p || factors.len() != p || blocks.layout.k() != k {
        return Err(Error::DimensionMismatch {
            context: "on-the-fly partition count",
            expected: blocks.layout.p(),
            got: p,
        });
    }
    for _ in 0..2 * (p - 1) {
        ledger.record(Stage::ReducedMatvec, k * nc);
    }
    let parts = try_map_partitions(schedule, p, |i| -> Result<_> {
        let coupled = coupling_rhs(
            blocks,
            i,
            nc,
            |j| x.bottom(j).into_owned(),
            |j| x.top(j).into_owned(),
        );
        let mut top = x.top(i).into_owned();
        let mut bot = x.bottom(i).into_owned();
        if let Some(rhs) = coupled {
            let s = factors[i].solve(&rhs)?;
            let n = s.nrows();
            top += s.rows(0, k);
            bot += s.rows(n - k, k);
        }
        Ok((top, bot))
    })?;
    Ok(ReducedVector::from_parts(k, nc, parts))
}

/// `pad(C_i prev_b) + pad(B_i next_t)` for partition `i`, or `None` when
/// both neighbour contributions are identically zero.
pub(crate) fn coupling_rhs(
    blocks: &PartitionBlocks,
    i: usize,
    nc: usize,
    prev_bottom: impl Fn(usize) -> DenseBlock,
    next_top: impl Fn(usize) -> DenseBlock,
) -> Option<DenseBlock> {
    let p = blocks.layout.p();
    let n = blocks.layout.size(i);
    let mut rhs = DenseBlock::zeros(n, nc);
    let mut any = false;
    if i > 0 {
        let c = &blocks.lower[i - 1] * prev_bottom(i - 1);
        if c.amax() != 0.0 {
            rhs += pad_coupling(&c, n, Side::Left);
            any = true;
        }
    }
    if i + 1 < p {
        let b = &blocks.upper[i] * next_top(i + 1);
        if b.amax() != 0.0 {
            rhs += pad_coupling(&b, n, Side::Right);
            any = true;
        }
    }
    any.then_some(rhs)
}

#[derive(Debug, Clone)]
struct Woodbury {
    sigma_t: DVector<f64>,
    /// `v_T u_{W,t} Sigma_W`
    e: DenseBlock,
    /// LU of `H = G - Sigma_T E`, `G = (v_W u_{T,b})^{-1}`.
    h: DenseLu,
}

/// Factors of one `2k x 2k` interface block `[[I, T_b], [W_t, I]]`.
#[derive(Debug, Clone)]
pub struct InterfaceBlock {
    /// `u_{T_j,b} Sigma_T`, held by partition `j`.
    u_tb_sigma: DenseBlock,
    /// `v_{W_{j+1}}`, held by partition `j` to compress its bottom tip.
    v_w: DenseBlock,
    /// `u_{W_{j+1},t} Sigma_W`, held by partition `j + 1`.
    u_wt_sigma: DenseBlock,
    /// `v_{T_j}`, held by partition `j + 1` to compress its top tip.
    v_t: DenseBlock,
    woodbury: Option<Woodbury>,
}

impl InterfaceBlock {
    pub fn rank_t(&self) -> usize {
        self.v_t.nrows()
    }

    pub fn rank_w(&self) -> usize {
        self.v_w.nrows()
    }

    /// 1-norm condition of `H`, or 1 when the block is triangular.
    pub fn cond_estimate(&self) -> f64 {
        self.woodbury.as_ref().map_or(1.0, |w| w.h.cond1())
    }
}

fn scale_columns(m: &DenseBlock, s: &DVector<f64>) -> DenseBlock {
    let mut out = m.clone();
    for (mut c, &v) in out.column_iter_mut().zip(s.iter()) {
        c *= v;
    }
    out
}

fn scale_rows(m: &DenseBlock, s: &DVector<f64>) -> DenseBlock {
    let mut out = m.clone();
    for (mut r, &v) in out.row_iter_mut().zip(s.iter()) {
        r *= v;
    }
    out
}

/// Block-diagonal inverse of the truncated low-rank reduced system.
#[derive(Debug, Clone)]
pub struct TruncatedPrecond {
    k: usize,
    interfaces: Vec<InterfaceBlock>,
}

impl TruncatedPrecond {
    /// Builds every interface block. When the two spikes of an interface
    /// have different nonzero ranks, both are cut to the smaller one.
    pub fn build(spikes: &InterfaceSpikes<LowRankSpike>, k: usize) -> Result<Self> {
        let interfaces = (0..spikes.interfaces())
            .map(|j| Self::build_interface(j, &spikes.t[j], &spikes.w[j], k))
            .collect::<Result<_>>()?;
        Ok(Self { k, interfaces })
    }

    fn build_interface(
        j: usize,
        t: &LowRankSpike,
        w: &LowRankSpike,
        k: usize,
    ) -> Result<InterfaceBlock> {
        let (mut rt, mut rw) = (t.rank(), w.rank());
        if rt > 0 && rw > 0 {
            rt = rt.min(rw);
            rw = rt;
        }
        let (_, u_tb) = t.tips(k)?;
        let (u_wt, _) = w.tips(k)?;
        let u_tb = u_tb.columns(0, rt).into_owned();
        let u_wt = u_wt.columns(0, rw).into_owned();
        let sigma_t = t.sigma.rows(0, rt).into_owned();
        let sigma_w = w.sigma.rows(0, rw).into_owned();
        let v_t = t.v.rows(0, rt).into_owned();
        let v_w = w.v.rows(0, rw).into_owned();
        let u_tb_sigma = scale_columns(&u_tb, &sigma_t);
        let u_wt_sigma = scale_columns(&u_wt, &sigma_w);

        let woodbury = if rt > 0 && rw > 0 {
            let kmat = &v_w * &u_tb;
            let k_lu = DenseLu::new(&kmat).map_err(|_| Error::IllConditionedInterface {
                interface: j,
                cond: f64::INFINITY,
            })?;
            let g = k_lu.solve(&DenseBlock::identity(rt, rt));
            // K can be well conditioned yet negligible next to the unit-scale
            // factors it is built from, so G is also measured against u_Tb.
            let cond_k = k_lu.cond1().max(norm1(&u_tb) * norm1(&g));
            if cond_k > INTERFACE_COND_LIMIT {
                return Err(Error::IllConditionedInterface {
                    interface: j,
                    cond: cond_k,
                });
            }
            let e = &v_t * &u_wt_sigma;
            let h = g - scale_rows(&e, &sigma_t);
            let h = DenseLu::new(&h).map_err(|_| Error::IllConditionedInterface {
                interface: j,
                cond: f64::INFINITY,
            })?;
            if h.cond1() > INTERFACE_COND_LIMIT {
                return Err(Error::IllConditionedInterface {
                    interface: j,
                    cond: h.cond1(),
                });
            }
            Some(Woodbury { sigma_t, e, h })
        } else {
            None
        };
        Ok(InterfaceBlock {
            u_tb_sigma,
            v_w,
            u_wt_sigma,
            v_t,
            woodbury,
        })
    }

    /// Identity preconditioner on `p` partitions.
    pub fn identity(p: usize, k: usize) -> Self {
        let empty = InterfaceBlock {
            u_tb_sigma: DenseBlock::zeros(k, 0),
            v_w: DenseBlock::zeros(0, k),
            u_wt_sigma: DenseBlock::zeros(k, 0),
            v_t: DenseBlock::zeros(0, k),
            woodbury: None,
        };
        Self {
            k,
            interfaces: vec![empty; p.saturating_sub(1)],
        }
    }

    pub fn interfaces(&self) -> &[InterfaceBlock] {
        &self.interfaces
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Applies the inverse of the truncated reduced system. Per interface,
    /// each side sends one compressed message to the other and both halves
    /// of the solution are then formed locally.
    pub fn apply(
        &self,
        g: &ReducedVector,
        ledger: &CommLedger,
        schedule: Schedule,
    ) -> Result<ReducedVector> {
        let (p, k, nc) = (g.p(), g.k(), g.ncols());
        if p != self.interfaces.len() + 1 || k != self.k {
            return Err(Error::DimensionMismatch {
                context: "preconditioner partition count",
                expected: self.interfaces.len() + 1,
                got: p,
            });
        }
        // msg_w: j -> j+1 carries v_W g_{j,b};  msg_t: j+1 -> j carries v_T g_{j+1,t}
        let msgs = map_partitions(schedule, p - 1, |j| {
            let b = &self.interfaces[j];
            let msg_w = (b.rank_w() > 0).then(|| &b.v_w * g.bottom(j));
            let msg_t = (b.rank_t() > 0).then(|| &b.v_t * g.top(j + 1));
            (msg_w, msg_t)
        });
        for (mw, mt) in &msgs {
            for m in [mw, mt].into_iter().flatten() {
                ledger.record(Stage::PrecondApply, m.len());
            }
        }

        let parts = map_partitions(schedule, p, |i| {
            let top = if i == 0 {
                g.top(0).into_owned()
            } else {
                self.top_half(i - 1, &g.top(i), msgs[i - 1].0.as_ref())
            };
            let bot = if i + 1 == p {
                g.bottom(i).into_owned()
            } else {
                self.bottom_half(i, &g.bottom(i), &msgs[i])
            };
            (top, bot)
        });
        Ok(ReducedVector::from_parts(k, nc, parts))
    }

    /// `y_{j+1,t} = M^{-1} (g_t - W_t g_b)`, computed on partition `j + 1`.
    fn top_half(
        &self,
        j: usize,
        g_t: &DMatrixView<'_, f64>,
        msg_w: Option<&DenseBlock>,
    ) -> DenseBlock {
        let b = &self.interfaces[j];
        let mut z = g_t.into_owned();
        if let Some(m) = msg_w {
            z -= &b.u_wt_sigma * m;
        }
        if let Some(wb) = &b.woodbury {
            let s = scale_rows(&(&b.v_t * &z), &wb.sigma_t);
            z += &b.u_wt_sigma * wb.h.solve(&s);
        }
        z
    }

    /// `y_{j,b} = g_b - T_b y_{j+1,t}`, computed on partition `j` from the
    /// received `v_T g_t` without seeing `g_t` itself.
    fn bottom_half(
        &self,
        j: usize,
        g_b: &DMatrixView<'_, f64>,
        msgs: &(Option<DenseBlock>, Option<DenseBlock>),
    ) -> DenseBlock {
        let b = &self.interfaces[j];
        let mut y = g_b.into_owned();
        let Some(msg_t) = &msgs.1 else {
            return y;
        };
        // v_T z = v_T g_t - E (v_W g_b)
        let mut w = msg_t.clone();
        if let (Some(wb), Some(msg_w)) = (&b.woodbury, &msgs.0) {
            w -= &wb.e * msg_w;
            let corr = &wb.e * wb.h.solve(&scale_rows(&w, &wb.sigma_t));
            w += corr;
        }
        y -= &b.u_tb_sigma * w;
        y
    }
}

/// Dense `S_r` from explicit tips.
pub fn assemble_exact(
    spikes: &InterfaceSpikes<FullSpike>,
    p: usize,
    k: usize,
) -> Result<DenseBlock> {
    let mut s = DenseBlock::identity(2 * k * p, 2 * k * p);
    for j in 0..spikes.interfaces() {
        let (tt, tb) = spikes.t[j].tips(k)?;
        let (wt, wb) = spikes.w[j].tips(k)?;
        place(&mut s, k, j, j + 1, &tt, &tb);
        place(&mut s, k, j + 1, j, &wt, &wb);
    }
    Ok(s)
}

/// Dense low-rank reduced system; `truncated` drops `T_t` and `W_b`.
pub fn assemble_lowrank(
    spikes: &InterfaceSpikes<LowRankSpike>,
    p: usize,
    k: usize,
    truncated: bool,
) -> Result<DenseBlock> {
    let mut s = DenseBlock::identity(2 * k * p, 2 * k * p);
    for j in 0..spikes.interfaces() {
        let t = spikes.t[j].to_dense();
        let w = spikes.w[j].to_dense();
        let (nt, nw) = (t.nrows(), w.nrows());
        let mut tt = t.rows(0, k).into_owned();
        let tb = t.rows(nt - k, k).into_owned();
        let wt = w.rows(0, k).into_owned();
        let mut wb = w.rows(nw - k, k).into_owned();
        if truncated {
            tt.fill(0.0);
            wb.fill(0.0);
        }
        place(&mut s, k, j, j + 1, &tt.as_view(), &tb.as_view());
        place(&mut s, k, j + 1, j, &wt.as_view(), &wb.as_view());
    }
    Ok(s)
}

/// Puts a spike's tips in partition `row_part`'s rows, multiplying the
/// neighbouring partition's tip (top of `col_part` for T, bottom for W).
fn place(
    s: &mut DenseBlock,
    k: usize,
    row_part: usize,
    col_part: usize,
    top: &DMatrixView<'_, f64>,
    bottom: &DMatrixView<'_, f64>,
) {
    let col = if col_part > row_part {
        2 * k * col_part
    } else {
        2 * k * col_part + k
    };
    s.view_mut((2 * k * row_part, col), (k, k)).copy_from(top);
    s.view_mut((2 * k * row_part + k, col), (k, k))
        .copy_from(bottom);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) struct Fixture {
        pub blocks: PartitionBlocks,
        pub factors: Vec<BlockFactor>,
        pub full: InterfaceSpikes<FullSpike>,
    }

    pub(crate) fn fixture(n: usize, p: usize, k: usize, dominance: f64, seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = synth::random_banded(n, k, dominance, &mut rng);
        let layout = PartitionLayout::new(n, p, k).unwrap();
        let blocks = PartitionBlocks::extract(&a, &layout).unwrap();
        let factors: Vec<_> = blocks
            .diag
            .iter()
            .map(|d| BlockFactor::factorize(d).unwrap())
            .collect();
        let full = InterfaceSpikes::compute_full(&blocks, &factors, Schedule::Sequential).unwrap();
        Fixture {
            blocks,
            factors,
            full,
        }
    }

    fn random_reduced(p: usize, k: usize, nc: usize, rng: &mut ChaCha8Rng) -> ReducedVector {
        ReducedVector::from_block(
            p,
            k,
            DenseBlock::from_fn(2 * k * p, nc, |_, _| rng.random::<f64>() - 0.5),
        )
        .unwrap()
    }

    #[test]
    fn gather_picks_tips() {
        let l = PartitionLayout::new(10, 2, 2).unwrap();
        let y = DenseBlock::from_fn(10, 1, |i, _| i as f64);
        let r = ReducedVector::gather(&l, &y);
        let vals: Vec<f64> = r.as_block().iter().copied().collect();
        assert_eq!(vals, vec![0.0, 1.0, 3.0, 4.0, 5.0, 6.0, 8.0, 9.0]);
    }

    #[test]
    fn exact_matvec_of_zero_and_zero_tips() {
        let f = fixture(60, 3, 3, 2.0, 1);
        let ledger = CommLedger::new();
        let z = ReducedVector::zeros(3, 3, 2);
        assert_eq!(
            matvec_exact(&f.full, &z, &ledger, Schedule::Sequential).unwrap(),
            z
        );

        let l = PartitionLayout::new(30, 3, 2).unwrap();
        let a = synth::block_diagonal(&l, 2);
        let blocks = PartitionBlocks::extract(&a, &l).unwrap();
        let factors: Vec<_> = blocks
            .diag
            .iter()
            .map(|d| BlockFactor::factorize(d).unwrap())
            .collect();
        let full = InterfaceSpikes::compute_full(&blocks, &factors, Schedule::Sequential).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_reduced(3, 2, 2, &mut rng);
        assert_eq!(
            matvec_exact(&full, &x, &ledger, Schedule::Sequential).unwrap(),
            x
        );
    }

    #[test]
    fn exact_matvec_matches_dense_assembly() {
        let f = fixture(90, 3, 4, 1.0, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_reduced(3, 4, 2, &mut rng);
        let s = assemble_exact(&f.full, 3, 4).unwrap();
        let y = matvec_exact(&f.full, &x, &CommLedger::new(), Schedule::Parallel).unwrap();
        assert!((y.as_block() - s * x.as_block()).amax() <= 1e-14);
    }

    #[test]
    fn otf_matches_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (n, p, k) in [(100, 2, 5), (240, 4, 6), (400, 6, 8)] {
            let f = fixture(n, p, k, 1.0, n as u64);
            let x = random_reduced(p, k, 3, &mut rng);
            let ledger = CommLedger::new();
            let e = matvec_exact(&f.full, &x, &ledger, Schedule::Sequential).unwrap();
            let o = matvec_otf(&f.blocks, &f.factors, &x, &ledger, Schedule::Parallel).unwrap();
            let scale = e.as_block().amax();
            assert!((e.as_block() - o.as_block()).amax() <= 1e-11 * scale.max(1.0));
        }
    }

    #[test]
    fn otf_ledger_counts_uncompressed_tips() {
        let f = fixture(120, 4, 5, 2.0, 5);
        let ledger = CommLedger::new();
        matvec_otf(
            &f.blocks,
            &f.factors,
            &ReducedVector::zeros(4, 5, 2),
            &ledger,
            Schedule::Sequential,
        )
        .unwrap();
        assert_eq!(ledger.snapshot().reduced_matvec.scalars, 2 * 3 * 5 * 2);
    }

    #[test]
    fn lowrank_full_rank_matches_exact() {
        let f = fixture(150, 3, 6, 1.0, 6);
        let lr = f.full.truncated(6);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_reduced(3, 6, 2, &mut rng);
        let ledger = CommLedger::new();
        let e = matvec_exact(&f.full, &x, &ledger, Schedule::Sequential).unwrap();
        let l = matvec_lowrank(&lr, &x, &ledger, Schedule::Sequential).unwrap();
        assert!((e.as_block() - l.as_block()).amax() <= 1e-10);
    }

    #[test]
    fn lowrank_rank_zero_is_identity_with_no_traffic() {
        let f = fixture(80, 4, 4, 2.0, 7);
        let lr = f.full.truncated(0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_reduced(4, 4, 2, &mut rng);
        let ledger = CommLedger::new();
        assert_eq!(
            matvec_lowrank(&lr, &x, &ledger, Schedule::Sequential).unwrap(),
            x
        );
        assert_eq!(ledger.snapshot().total_scalars(), 0);
    }

    #[test]
    fn lowrank_ledger_count() {
        let f = fixture(160, 4, 8, 1.0, 8);
        let lr = f.full.truncated(3);
        let ledger = CommLedger::new();
        matvec_lowrank(
            &lr,
            &ReducedVector::zeros(4, 8, 2),
            &ledger,
            Schedule::Sequential,
        )
        .unwrap();
        assert_eq!(ledger.snapshot().reduced_matvec.scalars, 36);
    }

    #[test]
    fn lowrank_error_within_truncation_bound() {
        let f = fixture(200, 4, 8, 1.0, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_reduced(4, 8, 1, &mut rng);
        let ledger = CommLedger::new();
        let e = matvec_exact(&f.full, &x, &ledger, Schedule::Sequential).unwrap();
        for r in [2, 4, 6, 8] {
            let lr = f.full.truncated(r);
            let l = matvec_lowrank(&lr, &x, &ledger, Schedule::Sequential).unwrap();
            let sigma_next = f
                .full
                .t
                .iter()
                .chain(&f.full.w)
                .map(|s| {
                    crate::dense::singular_values(&s.values)
                        .get(r)
                        .copied()
                        .unwrap_or(0.0)
                })
                .fold(0.0, f64::max);
            let err = (e.as_block() - l.as_block()).norm();
            assert!(
                err <= 10.0 * sigma_next * x.as_block().norm() * 4.0 + 1e-12,
                "r={r}"
            );
        }
    }

    #[test]
    fn precond_identity_cases() {
        let f = fixture(60, 3, 4, 2.0, 10);
        let ledger = CommLedger::new();
        let p0 = TruncatedPrecond::build(&f.full.truncated(0), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let g = random_reduced(3, 4, 2, &mut rng);
        assert_eq!(p0.apply(&g, &ledger, Schedule::Sequential).unwrap(), g);
        let p = TruncatedPrecond::build(&f.full.truncated(2), 4).unwrap();
        let z = ReducedVector::zeros(3, 4, 2);
        assert_eq!(p.apply(&z, &ledger, Schedule::Sequential).unwrap(), z);
    }

    #[test]
    fn precond_with_zero_bottom_tip_is_triangular() {
        let f = fixture(60, 2, 4, 2.0, 11);
        let mut lr = f.full.truncated(3);
        lr.t[0] = LowRankSpike::empty(lr.t[0].n(), 4, Side::Right);
        let p = TruncatedPrecond::build(&lr, 4).unwrap();
        assert_eq!(p.interfaces()[0].cond_estimate(), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = random_reduced(2, 4, 1, &mut rng);
        let y = p
            .apply(&g, &CommLedger::new(), Schedule::Sequential)
            .unwrap();
        let wt = lr.w[0].to_dense().rows(0, 4).into_owned();
        assert_eq!(y.bottom(0), g.bottom(0));
        let expect = g.top(1) - wt * g.bottom(0);
        assert!((y.top(1) - expect).amax() <= 1e-14);
    }

    #[test]
    fn precond_inverts_truncated_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for trial in 0..10 {
            let k = 6 + trial % 7;
            let r = 1 + trial % 5;
            let p = 2 + trial % 3;
            let f = fixture(p * 5 * k, p, k, 0.8, 100 + trial as u64);
            let lr = f.full.truncated(r);
            let pre = TruncatedPrecond::build(&lr, k).unwrap();
            let g = random_reduced(p, k, 2, &mut rng);
            let y = pre
                .apply(&g, &CommLedger::new(), Schedule::Parallel)
                .unwrap();
            let s = assemble_lowrank(&lr, p, k, true).unwrap();
            let back = s * y.as_block();
            assert!((back - g.as_block()).amax() <= 1e-10 * g.as_block().amax());
        }
    }

    #[test]
    fn precond_ledger_counts() {
        let f = fixture(200, 5, 6, 1.0, 13);
        let pre = TruncatedPrecond::build(&f.full.truncated(3), 6).unwrap();
        let ledger = CommLedger::new();
        pre.apply(
            &ReducedVector::zeros(5, 6, 2),
            &ledger,
            Schedule::Sequential,
        )
        .unwrap();
        let s = ledger.snapshot().precond_apply;
        assert_eq!(s.messages, 8);
        assert_eq!(s.scalars, 2 * 4 * 3 * 2);
    }

    #[test]
    fn singular_interface_is_reported() {
        let f = fixture(60, 2, 4, 1.0, 14);
        let mut lr = f.full.truncated(2);
        // make v_W orthogonal to the bottom tip of u_T
        let ub = lr.t[0].tips(4).unwrap().1.into_owned();
        let basis = crate::dense::orthonormalize(&ub);
        let full_basis = crate::dense::orthonormalize(&{
            let mut m = DenseBlock::zeros(4, 4);
            m.columns_mut(0, 2).copy_from(&basis);
            m.columns_mut(2, 2)
                .copy_from(&DenseBlock::from_fn(4, 2, |i, j| {
                    ((i + 2 * j) % 3) as f64 + 0.5
                }));
            m
        });
        lr.w[0].v = full_basis.columns(2, 2).transpose();
        assert!(matches!(
            TruncatedPrecond::build(&lr, 4),
            Err(Error::IllConditionedInterface { interface: 0, .. })
        ));
    }
}
