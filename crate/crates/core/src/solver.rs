//! The SPIKE variants as preconditioners and solvers.
//!
//! | variant      | reduced system           | recovery        |
//! |--------------|--------------------------|-----------------|
//! | LR-SPIKE-T   | truncated, direct        | low-rank spikes |
//! | LR-SPIKE-I   | low-rank, inner BiCGStab | low-rank spikes |
//! | LR-SPIKE-OTF | exact, BiCGStab          | block solves    |
//! | Block Jacobi | none                     | none            |
//!
//! T, I and Block Jacobi precondition an outer Krylov iteration on `A`.
//! OTF solves the true reduced system directly and tightens its tolerance
//! until the recovered solution meets the outer target.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::krylov::{bicgstab, cg, IterConfig, KrylovError, SolveReport};
use crate::ledger::{CommLedger, LedgerSnapshot, Stage};
use crate::lu::BlockFactor;
use crate::parallel::{map_partitions, try_map_partitions, Schedule};
use crate::partition::{PartitionBlocks, PartitionLayout};
use crate::reduced::{
    coupling_rhs, matvec_lowrank, matvec_otf, InterfaceSpikes, ReducedVector, TruncatedPrecond,
};
use crate::sparse::{CsrMatrix, DenseBlock};
use crate::spikes::{randomized_spike_svd, spike_rng, FullSpike, LowRankSpike, Side, SvdParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "lr-spike-i")]
    I,
    #[serde(rename = "lr-spike-t")]
    T,
    #[serde(rename = "lr-spike-otf")]
    Otf,
    #[serde(rename = "block-jacobi")]
    BlockJacobi,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::I, Variant::T, Variant::Otf, Variant::BlockJacobi];

    pub fn name(self) -> &'static str {
        match self {
            Variant::I => "lr-spike-i",
            Variant::T => "lr-spike-t",
            Variant::Otf => "lr-spike-otf",
            Variant::BlockJacobi => "block-jacobi",
        }
    }

    fn needs_spikes(self) -> bool {
        self != Variant::BlockJacobi
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t" | "lr-spike-t" => Ok(Variant::T),
            "i" | "lr-spike-i" => Ok(Variant::I),
            "otf" | "lr-spike-otf" => Ok(Variant::Otf),
            "bj" | "block-jacobi" => Ok(Variant::BlockJacobi),
            other => Err(Error::InvalidParameter(format!(
                "unknown variant `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OuterMethod {
    #[default]
    Bicgstab,
    Cg,
}

/// How spike SVDs are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpikeSvd {
    /// Randomized range finder; `None` oversampling means the default.
    Randomized {
        oversample: Option<usize>,
        passes: usize,
    },
    /// Dense SVD of the explicit spike. Only for small blocks.
    Exact,
}

impl Default for SpikeSvd {
    fn default() -> Self {
        SpikeSvd::Randomized {
            oversample: None,
            passes: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub variant: Variant,
    pub p: usize,
    pub k: usize,
    pub n_svd: usize,
    pub outer: IterConfig,
    pub method: OuterMethod,
    /// Inner solve of LR-SPIKE-I.
    pub inner: IterConfig,
    /// An inner solve that stops short of `inner.tol` is still accepted when
    /// its relative residual is below this.
    pub inner_accept: f64,
    /// Reduced solve of LR-SPIKE-OTF; its tolerance is the starting value.
    pub otf_redsys: IterConfig,
    pub otf_tighten: f64,
    pub otf_max_escalations: usize,
    pub svd: SpikeSvd,
    pub seed: u64,
    pub schedule: Schedule,
    /// Round block-solve inputs and outputs to `f32`.
    pub single_precision: bool,
}

impl SolverConfig {
    pub fn new(variant: Variant, p: usize, k: usize, n_svd: usize) -> Self {
        Self {
            variant,
            p,
            k,
            n_svd,
            outer: IterConfig {
                tol: 1e-7,
                max_iters: 500,
                ..IterConfig::default()
            },
            method: OuterMethod::Bicgstab,
            inner: IterConfig {
                tol: 1e-16,
                max_iters: 100,
                stagnation_limit: Some(3),
                ..IterConfig::default()
            },
            inner_accept: 1e-10,
            otf_redsys: IterConfig {
                tol: 1e-8,
                max_iters: 500,
                ..IterConfig::default()
            },
            otf_tighten: 1e2,
            otf_max_escalations: 4,
            svd: SpikeSvd::default(),
            seed: 0,
            schedule: Schedule::default(),
            single_precision: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::InvalidParameter("p must be at least 1".into()));
        }
        if self.k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        if self.n_svd > self.k {
            return Err(Error::InvalidParameter(format!(
                "n_svd = {} exceeds k = {}",
                self.n_svd, self.k
            )));
        }
        if self.method == OuterMethod::Cg && self.variant == Variant::Otf {
            return Err(Error::UnsupportedVariant {
                variant: self.variant.name(),
                op: "outer CG",
            });
        }
        if let SpikeSvd::Randomized { oversample, passes } = self.svd {
            if passes < 2 {
                return Err(Error::InvalidParameter(
                    "SVD passes must be at least 2".into(),
                ));
            }
            if let Some(o) = oversample {
                if self.n_svd + o > self.k {
                    return Err(Error::InvalidParameter(format!(
                        "n_svd + oversample = {} exceeds k = {}",
                        self.n_svd + o,
                        self.k
                    )));
                }
            }
        }
        self.outer.validate()?;
        self.inner.validate()?;
        self.otf_redsys.validate()
    }

    fn svd_params(&self, n_svd: usize) -> SvdParams {
        match self.svd {
            SpikeSvd::Randomized { oversample, passes } => {
                let mut params = SvdParams::with_defaults(n_svd, self.k);
                if let Some(o) = oversample {
                    params.oversample = o.min(self.k - n_svd);
                }
                params.passes = passes;
                params
            }
            SpikeSvd::Exact => SvdParams::with_defaults(n_svd, self.k),
        }
    }
}

/// Everything built once per matrix: blocks, their factors, low-rank
/// spikes and the truncated preconditioner.
#[derive(Debug)]
pub struct SpikeFactorization {
    pub config: SolverConfig,
    pub blocks: PartitionBlocks,
    pub factors: Vec<BlockFactor>,
    pub lowrank: InterfaceSpikes<LowRankSpike>,
    pub trunc: TruncatedPrecond,
    /// `n_svd` actually used; halved once if an interface was ill conditioned.
    pub n_svd_used: usize,
    pub ledger: CommLedger,
    pub factorize_time: f64,
}

fn compute_lowrank(
    blocks: &PartitionBlocks,
    factors: &[BlockFactor],
    cfg: &SolverConfig,
    n_svd: usize,
) -> Result<InterfaceSpikes<LowRankSpike>> {
    let layout = &blocks.layout;
    let m = layout.interfaces();
    let k = layout.k();
    if n_svd == 0 || !cfg.variant.needs_spikes() {
        return Ok(InterfaceSpikes {
            t: (0..m)
                .map(|j| LowRankSpike::empty(layout.size(j), k, Side::Right))
                .collect(),
            w: (0..m)
                .map(|j| LowRankSpike::empty(layout.size(j + 1), k, Side::Left))
                .collect(),
        });
    }
    let one = |part: usize, coupling: &DenseBlock, side: Side| -> Result<LowRankSpike> {
        match cfg.svd {
            SpikeSvd::Exact => Ok(LowRankSpike::from_full(
                &FullSpike::compute(&factors[part], coupling, side)?,
                n_svd,
            )),
            SpikeSvd::Randomized { .. } => {
                let mut rng = spike_rng(cfg.seed, part, side);
                randomized_spike_svd(
                    &factors[part],
                    coupling,
                    side,
                    cfg.svd_params(n_svd),
                    &mut rng,
                )
            }
        }
    };
    let t = try_map_partitions(cfg.schedule, m, |j| one(j, &blocks.upper[j], Side::Right))?;
    let w = try_map_partitions(cfg.schedule, m, |j| {
        one(j + 1, &blocks.lower[j], Side::Left)
    })?;
    Ok(InterfaceSpikes { t, w })
}

/// Partitions `a`, factorizes the diagonal blocks and builds the spikes and
/// truncated preconditioner. An ill-conditioned interface triggers one retry
/// with half the rank.
pub fn factorize(a: &CsrMatrix, cfg: &SolverConfig) -> Result<SpikeFactorization> {
    cfg.validate()?;
    let start = Instant::now();
    if !a.is_square() {
        return Err(Error::NotSquare {
            n_rows: a.n_rows(),
            n_cols: a.n_cols(),
        });
    }
    let layout = PartitionLayout::new(a.n_rows(), cfg.p, cfg.k)?;
    let blocks = PartitionBlocks::extract(a, &layout)?;
    let factors = try_map_partitions(cfg.schedule, cfg.p, |i| {
        BlockFactor::factorize(&blocks.diag[i])
    })?;

    let mut n_svd = if cfg.variant.needs_spikes() {
        cfg.n_svd
    } else {
        0
    };
    let mut retried = false;
    let (lowrank, trunc) = loop {
        let lowrank = compute_lowrank(&blocks, &factors, cfg, n_svd)?;
        match TruncatedPrecond::build(&lowrank, cfg.k) {
            Ok(t) => break (lowrank, t),
            Err(Error::IllConditionedInterface { interface, cond }) if !retried => {
                log::warn!(
                    "interface {interface} ill conditioned ({cond:.2e}); retrying with n_svd = {}",
                    n_svd / 2
                );
                n_svd /= 2;
                retried = true;
            }
            Err(e) => return Err(e),
        }
    };
    Ok(SpikeFactorization {
        config: cfg.clone(),
        blocks,
        factors,
        lowrank,
        trunc,
        n_svd_used: n_svd,
        ledger: CommLedger::new(),
        factorize_time: start.elapsed().as_secs_f64(),
    })
}

fn round_f32(m: &DenseBlock) -> DenseBlock {
    m.map(|v| v as f32 as f64)
}

impl SpikeFactorization {
    pub fn layout(&self) -> &PartitionLayout {
        &self.blocks.layout
    }

    fn check_rhs(&self, f: &DenseBlock) -> Result<()> {
        let n = self.layout().n();
        if f.nrows() != n {
            return Err(Error::DimensionMismatch {
                context: "right-hand side rows",
                expected: n,
                got: f.nrows(),
            });
        }
        Ok(())
    }

    /// `D^{-1} f`: independent block solves.
    pub fn d_stage(&self, f: &DenseBlock) -> Result<DenseBlock> {
        self.check_rhs(f)?;
        let layout = self.layout();
        let parts = try_map_partitions(self.config.schedule, layout.p(), |i| {
            let fi = layout.slice(f, i).into_owned();
            if self.config.single_precision {
                Ok(round_f32(&self.factors[i].solve(&round_f32(&fi))?))
            } else {
                self.factors[i].solve(&fi)
            }
        })?;
        Ok(stack(layout, f.ncols(), parts))
    }

    pub fn apply_block_jacobi(&self, f: &DenseBlock) -> Result<DenseBlock> {
        self.d_stage(f)
    }

    /// LR-SPIKE-T: direct truncated reduced solve, low-rank recovery.
    pub fn apply_precond_t(&self, f: &DenseBlock) -> Result<DenseBlock> {
        let y = self.d_stage(f)?;
        let y_r = ReducedVector::gather(self.layout(), &y);
        let x_r = self.trunc.apply(&y_r, &self.ledger, self.config.schedule)?;
        Ok(self.recover_lowrank(y, &x_r))
    }

    /// LR-SPIKE-I: inner BiCGStab on the low-rank reduced system. Returns
    /// the inner iteration count with the result.
    pub fn apply_precond_i(&self, f: &DenseBlock) -> Result<(DenseBlock, f64)> {
        if self.config.variant != Variant::I {
            return Err(Error::UnsupportedVariant {
                variant: self.config.variant.name(),
                op: "apply_precond_i",
            });
        }
        let y = self.d_stage(f)?;
        let layout = self.layout();
        let (p, k) = (layout.p(), layout.k());
        let y_r = ReducedVector::gather(layout, &y);
        let sched = self.config.schedule;
        let op = |v: &DenseBlock| -> Result<DenseBlock> {
            let x = ReducedVector::from_block(p, k, v.clone())?;
            Ok(matvec_lowrank(&self.lowrank, &x, &self.ledger, sched)?.into_block())
        };
        let pre = |v: &DenseBlock| -> Result<DenseBlock> {
            let g = ReducedVector::from_block(p, k, v.clone())?;
            Ok(self.trunc.apply(&g, &self.ledger, sched)?.into_block())
        };
        let (x_r, rep) = match bicgstab(op, pre, y_r.as_block(), &self.config.inner) {
            Ok(res) => res,
            Err(KrylovError::Breakdown { x, report, .. }) => (x, *report),
            Err(KrylovError::Operator(e)) => return Err(e),
        };
        if !rep.converged
            && (rep.residual_final.is_nan() || rep.residual_final > self.config.inner_accept)
        {
            return Err(Error::PreconditionerFailure {
                residual: rep.residual_final,
                iterations: rep.iterations,
            });
        }
        let x_r = ReducedVector::from_block(p, k, x_r)?;
        Ok((self.recover_lowrank(y, &x_r), rep.iterations))
    }

    /// `x_i = y_i - W_i x_{i-1,b} - T_i x_{i+1,t}` with low-rank spikes; each
    /// neighbour tip arrives compressed by the receiver's `v`.
    fn recover_lowrank(&self, y: DenseBlock, x_r: &ReducedVector) -> DenseBlock {
        let layout = self.layout();
        let p = layout.p();
        let sp = &self.lowrank;
        let msgs = map_partitions(self.config.schedule, p - 1, |j| {
            let down = (sp.w[j].rank() > 0).then(|| sp.w[j].compress(&x_r.bottom(j)));
            let up = (sp.t[j].rank() > 0).then(|| sp.t[j].compress(&x_r.top(j + 1)));
            (down, up)
        });
        for (down, up) in &msgs {
            for m in [down, up].into_iter().flatten() {
                self.ledger.record(Stage::Recovery, m.len());
            }
        }
        if msgs.iter().all(|(d, u)| d.is_none() && u.is_none()) {
            return y;
        }
        let parts = map_partitions(self.config.schedule, p, |i| {
            let n = layout.size(i);
            let mut xi = layout.slice(&y, i).into_owned();
            if i > 0 {
                if let Some(m) = &msgs[i - 1].0 {
                    xi -= sp.w[i - 1].expand_rows(0, n, m);
                }
            }
            if i + 1 < p {
                if let Some(m) = &msgs[i].1 {
                    xi -= sp.t[i].expand_rows(0, n, m);
                }
            }
            xi
        });
        stack(layout, y.ncols(), parts)
    }

    /// Exact recovery: one padded block solve per partition, fed by the
    /// raw neighbour tips.
    fn recover_exact(&self, y: &DenseBlock, x_r: &ReducedVector) -> Result<DenseBlock> {
        let layout = self.layout();
        let (p, k, nc) = (layout.p(), layout.k(), y.ncols());
        for _ in 0..2 * (p - 1) {
            self.ledger.record(Stage::Recovery, k * nc);
        }
        let parts = try_map_partitions(self.config.schedule, p, |i| -> Result<DenseBlock> {
            let mut xi = layout.slice(y, i).into_owned();
            let rhs = coupling_rhs(
                &self.blocks,
                i,
                nc,
                |j| x_r.bottom(j).into_owned(),
                |j| x_r.top(j).into_owned(),
            );
            if let Some(rhs) = rhs {
                xi -= self.factors[i].solve(&rhs)?;
            }
            Ok(xi)
        })?;
        Ok(stack(layout, nc, parts))
    }

    /// LR-SPIKE-OTF: BiCGStab on the exact reduced system, preconditioned by
    /// the truncated one, then exact recovery. The reduced tolerance is
    /// tightened until the full residual meets `outer.tol`.
    pub fn solve_otf(&self, a: &CsrMatrix, f: &DenseBlock) -> Result<(DenseBlock, SolveReport)> {
        let start = Instant::now();
        let before = self.ledger.snapshot();
        let cfg = &self.config;
        let y = self.d_stage(f)?;
        let layout = self.layout();
        let (p, k) = (layout.p(), layout.k());
        let y_r = ReducedVector::gather(layout, &y);
        let sched = cfg.schedule;
        let fnorm: Vec<f64> = f.column_iter().map(|c| c.norm()).collect();

        let mut report = SolveReport {
            seed: Some(cfg.seed),
            ..SolveReport::default()
        };
        let mut red_cfg = cfg.otf_redsys.clone();
        let mut x = y.clone();
        let uncoupled = self
            .blocks
            .upper
            .iter()
            .chain(&self.blocks.lower)
            .all(|b| b.amax() == 0.0);
        let escalations = if uncoupled {
            0
        } else {
            cfg.otf_max_escalations + 1
        };
        if uncoupled {
            report.residual_final = relative_max(&(f - a.spmv(&x, None)?), &fnorm);
            report.converged = report.residual_final <= cfg.outer.tol;
            report.residual_history.push(report.residual_final);
        }
        for escalation in 0..escalations {
            let op = |v: &DenseBlock| -> Result<DenseBlock> {
                let x = ReducedVector::from_block(p, k, v.clone())?;
                Ok(matvec_otf(&self.blocks, &self.factors, &x, &self.ledger, sched)?.into_block())
            };
            let pre = |v: &DenseBlock| -> Result<DenseBlock> {
                let g = ReducedVector::from_block(p, k, v.clone())?;
                Ok(self.trunc.apply(&g, &self.ledger, sched)?.into_block())
            };
            let (x_r, rep) = bicgstab(op, pre, y_r.as_block(), &red_cfg).map_err(Error::from)?;
            report.iterations += rep.iterations;
            report.matvecs += rep.matvecs;
            report.precond_applications += rep.precond_applications;
            report.residual_history.extend(&rep.residual_history);
            let x_r = ReducedVector::from_block(p, k, x_r)?;
            x = self.recover_exact(&y, &x_r)?;
            let r = f - a.spmv(&x, None)?;
            report.matvecs += 1;
            report.residual_final = relative_max(&r, &fnorm);
            if report.residual_final <= cfg.outer.tol {
                report.converged = true;
                break;
            }
            log::debug!(
                "otf escalation {escalation}: residual {:.3e} above {:.1e}",
                report.residual_final,
                cfg.outer.tol
            );
            red_cfg.tol /= cfg.otf_tighten;
            red_cfg.initial_guess = Some(x_r.into_block());
        }
        report.comm = self.ledger.snapshot().since(&before);
        report.comm_scalars = report.comm.total_scalars();
        report.wall_time = start.elapsed().as_secs_f64();
        Ok((x, report))
    }

    /// Applies this factorization's preconditioner; the second value is the
    /// number of inner iterations spent.
    pub fn apply_precond(&self, f: &DenseBlock) -> Result<(DenseBlock, f64)> {
        match self.config.variant {
            Variant::T => Ok((self.apply_precond_t(f)?, 0.0)),
            Variant::I => self.apply_precond_i(f),
            Variant::BlockJacobi => Ok((self.apply_block_jacobi(f)?, 0.0)),
            Variant::Otf => Ok((self.apply_precond_t(f)?, 0.0)),
        }
    }

    /// Outer Krylov solve on `a` with this factorization as preconditioner,
    /// or the OTF reduced solve.
    pub fn solve(&self, a: &CsrMatrix, f: &DenseBlock) -> Result<(DenseBlock, SolveReport)> {
        self.check_rhs(f)?;
        if self.config.variant == Variant::Otf {
            return self.solve_otf(a, f);
        }
        let before = self.ledger.snapshot();
        let mut inner = 0.0;
        let op = |x: &DenseBlock| a.spmv(x, None);
        let pre = |x: &DenseBlock| -> Result<DenseBlock> {
            let (y, it) = self.apply_precond(x)?;
            inner += it;
            Ok(y)
        };
        let outcome = match self.config.method {
            OuterMethod::Bicgstab => bicgstab(op, pre, f, &self.config.outer),
            OuterMethod::Cg => cg(op, pre, f, &self.config.outer),
        };
        let (x, mut report) = outcome.map_err(Error::from)?;
        report.inner_iterations = inner;
        report.comm = self.ledger.snapshot().since(&before);
        report.comm_scalars = report.comm.total_scalars();
        report.seed = Some(self.config.seed);
        Ok((x, report))
    }
}

fn relative_max(r: &DenseBlock, norms: &[f64]) -> f64 {
    r.column_iter()
        .zip(norms)
        .map(|(c, &b)| if b > 0.0 { c.norm() / b } else { c.norm() })
        .fold(0.0, f64::max)
}

fn stack(layout: &PartitionLayout, ncols: usize, parts: Vec<DenseBlock>) -> DenseBlock {
    let mut out = DenseBlock::zeros(layout.n(), ncols);
    for (i, part) in parts.into_iter().enumerate() {
        out.rows_mut(layout.offset(i), layout.size(i))
            .copy_from(&part);
    }
    out
}

/// Factorizes and solves in one call.
pub fn solve(
    a: &CsrMatrix,
    f: &DenseBlock,
    cfg: &SolverConfig,
) -> Result<(DenseBlock, SolveReport, Timings)> {
    let fact = factorize(a, cfg)?;
    let start = Instant::now();
    let (x, report) = fact.solve(a, f)?;
    let timings = Timings {
        factorize: fact.factorize_time,
        solve: start.elapsed().as_secs_f64(),
    };
    Ok((x, report, timings))
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Timings {
    pub factorize: f64,
    pub solve: f64,
}

/// The JSON document written by the `solve` command.
#[derive(Debug, Clone, Serialize)]
pub struct SolveSummary {
    pub variant: Variant,
    pub p: usize,
    pub k: usize,
    pub n_svd: usize,
    pub converged: bool,
    pub iterations: f64,
    pub inner_iterations: f64,
    pub residual_final: f64,
    pub comm: LedgerSnapshot,
    pub timings: Timings,
    pub seed: u64,
}

impl SolveSummary {
    pub fn new(
        cfg: &SolverConfig,
        n_svd_used: usize,
        report: &SolveReport,
        timings: Timings,
    ) -> Self {
        Self {
            variant: cfg.variant,
            p: cfg.p,
            k: cfg.k,
            n_svd: n_svd_used,
            converged: report.converged,
            iterations: report.iterations,
            inner_iterations: report.inner_iterations,
            residual_final: report.residual_final,
            comm: report.comm,
            timings,
            seed: cfg.seed,
        }
    }
}
