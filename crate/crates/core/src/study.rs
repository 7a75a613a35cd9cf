//! Desk-scale studies: exact condition numbers of the preconditioned
//! operators, singular-value decay of spikes and couplings, and a benchmark
//! runner over a manifest of matrices, variants and ranks.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dense::{cond2, singular_values};
use crate::error::{Error, Result};
use crate::lu::BlockFactor;
use crate::mm::read_matrix_market;
use crate::parallel::{map_partitions, try_map_partitions, Schedule};
use crate::partition::{PartitionBlocks, PartitionLayout};
use crate::reduced::{assemble_exact, assemble_lowrank, InterfaceSpikes, ReducedVector};
use crate::reorder::Reordering;
use crate::solver::{factorize, SolverConfig, SpikeFactorization, SpikeSvd, Variant};
use crate::sparse::{CsrMatrix, DenseBlock};
use crate::synth;

/// Largest order for which operators are materialized densely.
pub const DENSE_STUDY_LIMIT: usize = 4000;

fn guard(n: usize) -> Result<()> {
    if n > DENSE_STUDY_LIMIT {
        return Err(Error::TooLarge {
            n,
            limit: DENSE_STUDY_LIMIT,
        });
    }
    Ok(())
}

/// Where a study's matrix came from, enough to re-run it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub matrix: String,
    pub pipeline: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionGrid {
    pub p: Vec<usize>,
    pub n_svd: Vec<usize>,
    /// Coupling size; the matrix bandwidth when absent.
    pub k: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub exact_svd: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct ConditionCell {
    pub p: usize,
    pub n_svd: usize,
    pub k: usize,
    pub n_svd_used: Option<usize>,
    /// `cond(S~~_r^{-1} S~_r)`
    pub reduced_lowrank: Option<f64>,
    /// `cond(S~^{-1} S)`, the LR-SPIKE-I operator.
    pub lr_spike_i: Option<f64>,
    /// `cond(S~~^{-1} S)`, the LR-SPIKE-T operator.
    pub lr_spike_t: Option<f64>,
    /// `cond(S~~_r^{-1} S_r)`
    pub reduced_exact: Option<f64>,
    /// `cond(D^{-1} A)`
    pub block_jacobi: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionStudy {
    pub kind: String,
    pub provenance: Provenance,
    pub n: usize,
    pub unpreconditioned: f64,
    pub grid: ConditionGrid,
    pub cells: Vec<ConditionCell>,
}

impl ConditionStudy {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("p,n_svd,k,n_svd_used,reduced_lowrank,lr_spike_i,lr_spike_t,reduced_exact,block_jacobi,error\n");
        let f = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                c.p,
                c.n_svd,
                c.k,
                c.n_svd_used.map(|v| v.to_string()).unwrap_or_default(),
                f(c.reduced_lowrank),
                f(c.lr_spike_i),
                f(c.lr_spike_t),
                f(c.reduced_exact),
                f(c.block_jacobi),
                c.error.as_deref().unwrap_or("").replace(',', ";")
            );
        }
        out
    }
}

/// Full-size `S~ = I + low-rank spikes`.
pub fn assemble_s_lowrank(fact: &SpikeFactorization) -> DenseBlock {
    let layout = fact.layout();
    let (n, k) = (layout.n(), layout.k());
    let mut s = DenseBlock::identity(n, n);
    for j in 0..layout.interfaces() {
        let t = fact.lowrank.t[j].to_dense();
        let w = fact.lowrank.w[j].to_dense();
        let c_next = layout.offset(j + 1);
        let c_prev = layout.offset(j) + layout.size(j) - k;
        s.view_mut((layout.offset(j), c_next), (t.nrows(), k))
            .copy_from(&t);
        s.view_mut((layout.offset(j + 1), c_prev), (w.nrows(), k))
            .copy_from(&w);
    }
    s
}

/// Condition number of the LR-SPIKE-T preconditioned operator
/// `S~~^{-1} D^{-1} A`, materialized column by column.
pub fn cond_lr_spike_t(fact: &SpikeFactorization, a_dense: &DenseBlock) -> Result<f64> {
    guard(a_dense.nrows())?;
    Ok(cond2(&fact.apply_precond_t(a_dense)?))
}

fn condition_cell(
    a: &CsrMatrix,
    a_dense: &DenseBlock,
    p: usize,
    k: usize,
    n_svd: usize,
    grid: &ConditionGrid,
) -> Result<ConditionCell> {
    let mut cfg = SolverConfig::new(Variant::T, p, k, n_svd);
    cfg.seed = grid.seed;
    cfg.schedule = Schedule::Sequential;
    if grid.exact_svd {
        cfg.svd = SpikeSvd::Exact;
    }
    let fact = factorize(a, &cfg)?;
    let layout = fact.layout().clone();
    let s = fact.apply_block_jacobi(a_dense)?;

    let s_tilde = assemble_s_lowrank(&fact);
    let lr_i = s_tilde
        .lu()
        .solve(&s)
        .map(|m| cond2(&m))
        .unwrap_or(f64::INFINITY);
    let lr_t = cond2(&fact.apply_precond_t(a_dense)?);

    let full = InterfaceSpikes::compute_full(&fact.blocks, &fact.factors, Schedule::Sequential)?;
    let s_r = assemble_exact(&full, p, k)?;
    let s_r_tilde = assemble_lowrank(&fact.lowrank, p, k, false)?;
    let ledger = crate::ledger::CommLedger::new();
    let precond_reduced = |m: DenseBlock| -> Result<f64> {
        let v = ReducedVector::from_block(p, k, m)?;
        Ok(cond2(
            fact.trunc
                .apply(&v, &ledger, Schedule::Sequential)?
                .as_block(),
        ))
    };
    Ok(ConditionCell {
        p,
        n_svd,
        k: layout.k(),
        n_svd_used: Some(fact.n_svd_used),
        reduced_lowrank: Some(precond_reduced(s_r_tilde)?),
        lr_spike_i: Some(lr_i),
        lr_spike_t: Some(lr_t),
        reduced_exact: Some(precond_reduced(s_r)?),
        block_jacobi: Some(cond2(&s)),
        error: None,
    })
}

/// Exact 2-norm condition numbers over a `(p, n_svd)` grid.
pub fn condition_study(
    a: &CsrMatrix,
    provenance: Provenance,
    grid: &ConditionGrid,
) -> Result<ConditionStudy> {
    let n = a.n_rows();
    guard(n)?;
    let k = match grid.k {
        Some(k) => k,
        None => a.band_metrics()?.band.k.max(1),
    };
    let a_dense = a.to_dense();
    let cells_idx: Vec<(usize, usize)> = grid
        .p
        .iter()
        .flat_map(|&p| grid.n_svd.iter().map(move |&r| (p, r)))
        .collect();
    let cells = map_partitions(Schedule::Parallel, cells_idx.len(), |c| {
        let (p, r) = cells_idx[c];
        condition_cell(a, &a_dense, p, k, r, grid).unwrap_or_else(|e| ConditionCell {
            p,
            n_svd: r,
            k,
            error: Some(e.to_string()),
            ..ConditionCell::default()
        })
    });
    Ok(ConditionStudy {
        kind: "condition".into(),
        provenance,
        n,
        unpreconditioned: cond2(&a_dense),
        grid: grid.clone(),
        cells,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DecayRow {
    /// `T`, `W`, `B` or `C`.
    pub matrix: String,
    pub partition: usize,
    pub index: usize,
    pub sigma: f64,
    /// `sigma` over the largest singular value of all matrices of this kind.
    pub normalized: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvdDecayStudy {
    pub kind: String,
    pub provenance: Provenance,
    pub p: usize,
    pub k: usize,
    pub rows: Vec<DecayRow>,
}

impl SvdDecayStudy {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("matrix,partition,index,sigma,normalized\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:e},{:e}",
                r.matrix, r.partition, r.index, r.sigma, r.normalized
            );
        }
        out
    }

    /// Normalized spectrum of one matrix.
    pub fn curve(&self, matrix: &str, partition: usize) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.matrix == matrix && r.partition == partition)
            .map(|r| r.normalized)
            .collect()
    }
}

/// Full singular spectra of every spike `T_i`, `W_i` and coupling `B_i`,
/// `C_i`, each kind normalized by its own maximum.
pub fn svd_decay_study(
    a: &CsrMatrix,
    p: usize,
    k: usize,
    provenance: Provenance,
) -> Result<SvdDecayStudy> {
    guard(a.n_rows())?;
    let layout = PartitionLayout::new(a.n_rows(), p, k)?;
    let blocks = PartitionBlocks::extract(a, &layout)?;
    let factors = try_map_partitions(Schedule::Parallel, p, |i| {
        BlockFactor::factorize(&blocks.diag[i])
    })?;
    let full = InterfaceSpikes::compute_full(&blocks, &factors, Schedule::Parallel)?;
    let m = layout.interfaces();
    let sets: [(&str, Vec<(usize, &DenseBlock)>); 4] = [
        ("T", (0..m).map(|j| (j, &full.t[j].values)).collect()),
        ("W", (0..m).map(|j| (j + 1, &full.w[j].values)).collect()),
        ("B", (0..m).map(|j| (j, &blocks.upper[j])).collect()),
        ("C", (0..m).map(|j| (j + 1, &blocks.lower[j])).collect()),
    ];
    let mut rows = Vec::new();
    for (name, mats) in sets {
        let spectra: Vec<(usize, Vec<f64>)> =
            mats.iter().map(|(i, m)| (*i, singular_values(m))).collect();
        let max = spectra
            .iter()
            .flat_map(|(_, s)| s.iter().copied())
            .fold(0.0, f64::max);
        for (part, s) in spectra {
            for (index, sigma) in s.into_iter().enumerate() {
                rows.push(DecayRow {
                    matrix: name.into(),
                    partition: part,
                    index,
                    sigma,
                    normalized: if max > 0.0 { sigma / max } else { 0.0 },
                });
            }
        }
    }
    Ok(SvdDecayStudy {
        kind: "svd-decay".into(),
        provenance,
        p,
        k,
        rows,
    })
}

/// Built-in matrices for manifests and tests.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SyntheticMatrix {
    Identity {
        n: usize,
    },
    Banded {
        n: usize,
        k: usize,
        dominance: f64,
        seed: u64,
    },
    Laplacian {
        nx: usize,
        ny: usize,
    },
    Reservoir {
        grid: synth::Reservoir,
        seed: u64,
    },
}

impl SyntheticMatrix {
    pub fn build(&self) -> CsrMatrix {
        match *self {
            SyntheticMatrix::Identity { n } => CsrMatrix::identity(n),
            SyntheticMatrix::Banded {
                n,
                k,
                dominance,
                seed,
            } => synth::random_banded(n, k, dominance, &mut ChaCha8Rng::seed_from_u64(seed)),
            SyntheticMatrix::Laplacian { nx, ny } => synth::laplacian_2d(nx, ny),
            SyntheticMatrix::Reservoir { grid, seed } => {
                grid.build(&mut ChaCha8Rng::seed_from_u64(seed))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchMatrix {
    pub name: String,
    /// Matrix Market file, relative to the manifest.
    pub path: Option<PathBuf>,
    pub synthetic: Option<SyntheticMatrix>,
    /// Run the strip, scale and RCM pipeline first.
    #[serde(default = "default_true")]
    pub reorder: bool,
    pub p: usize,
    /// Coupling size; the (reordered) bandwidth when absent.
    pub k: Option<usize>,
    /// Published iteration counts per variant name, carried into the report.
    #[serde(default)]
    pub reference: std::collections::BTreeMap<String, f64>,
}

fn default_true() -> bool {
    true
}

fn default_tol() -> f64 {
    1e-7
}

fn default_max_iters() -> usize {
    500
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchManifest {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    pub variants: Vec<String>,
    pub n_svd: Vec<usize>,
    #[serde(rename = "matrix")]
    pub matrices: Vec<BenchMatrix>,
}

/// Outcome codes of a benchmark cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellStatus {
    #[serde(rename = "OK")]
    Ok,
    /// Failure in the factorization stage.
    #[serde(rename = "FF")]
    FactorFailure,
    /// Failure in the solve stage (breakdown).
    #[serde(rename = "SF")]
    SolveFailure,
    /// Not converged within the iteration limit.
    #[serde(rename = "NC")]
    NotConverged,
}

impl CellStatus {
    pub fn code(self) -> &'static str {
        match self {
            CellStatus::Ok => "OK",
            CellStatus::FactorFailure => "FF",
            CellStatus::SolveFailure => "SF",
            CellStatus::NotConverged => "NC",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchCell {
    pub matrix: String,
    pub variant: String,
    pub n_svd: usize,
    pub p: usize,
    pub k: usize,
    pub status: CellStatus,
    pub iterations: Option<f64>,
    pub inner_iterations: Option<f64>,
    pub residual_final: Option<f64>,
    pub reference: Option<f64>,
    pub message: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub tol: f64,
    pub cells: Vec<BenchCell>,
}

impl BenchReport {
    /// Table-shaped CSV: `outer (inner)` iterations or a failure code. No
    /// timings, so equal seeds give identical bytes.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("matrix,variant,n_svd,p,k,iterations,status,residual_final,reference\n");
        for c in &self.cells {
            let it = match (c.status, c.iterations, c.inner_iterations) {
                (CellStatus::Ok, Some(o), Some(i)) if i > 0.0 => format!("{o} ({i})"),
                (CellStatus::Ok, Some(o), _) => format!("{o}"),
                (s, _, _) => s.code().to_string(),
            };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                c.matrix,
                c.variant,
                c.n_svd,
                c.p,
                c.k,
                it,
                c.status.code(),
                c.residual_final
                    .map(|r| format!("{r:e}"))
                    .unwrap_or_default(),
                c.reference.map(|r| r.to_string()).unwrap_or_default()
            );
        }
        out
    }
}

/// A benchmark matrix after loading and optional reordering, with the
/// right-hand side of ones mapped into its numbering.
pub struct PreparedMatrix {
    pub matrix: CsrMatrix,
    pub rhs: DenseBlock,
    pub k: usize,
}

pub fn prepare_matrix(m: &BenchMatrix, base: &Path) -> Result<PreparedMatrix> {
    let a = match (&m.path, &m.synthetic) {
        (Some(p), _) => read_matrix_market(base.join(p))?,
        (None, Some(s)) => s.build(),
        (None, None) => {
            return Err(Error::InvalidParameter(format!(
                "matrix `{}` needs a path or a synthetic source",
                m.name
            )))
        }
    };
    let ones = DenseBlock::from_element(a.n_rows(), 1, 1.0);
    let (matrix, rhs) = if m.reorder {
        let r = Reordering::new(&a)?;
        let f = r.map_rhs(&ones);
        (r.matrix, f)
    } else {
        (a, ones)
    };
    let band = matrix.band_metrics()?.band.k.max(1);
    Ok(PreparedMatrix {
        k: m.k.unwrap_or(band),
        matrix,
        rhs,
    })
}

fn run_cell(
    prep: &PreparedMatrix,
    m: &BenchMatrix,
    variant: Variant,
    n_svd: usize,
    man: &BenchManifest,
) -> BenchCell {
    let mut cell = BenchCell {
        matrix: m.name.clone(),
        variant: variant.name().into(),
        n_svd,
        p: m.p,
        k: prep.k,
        status: CellStatus::Ok,
        iterations: None,
        inner_iterations: None,
        residual_final: None,
        reference: m.reference.get(variant.name()).copied(),
        message: None,
    };
    let mut cfg = SolverConfig::new(variant, m.p, prep.k, n_svd.min(prep.k));
    cfg.seed = man.seed;
    cfg.outer.tol = man.tol;
    cfg.outer.max_iters = man.max_iters;
    cfg.schedule = Schedule::Sequential;
    let fact = match factorize(&prep.matrix, &cfg) {
        Ok(f) => f,
        Err(e) => {
            cell.status = CellStatus::FactorFailure;
            cell.message = Some(e.to_string());
            return cell;
        }
    };
    match fact.solve(&prep.matrix, &prep.rhs) {
        Ok((_, rep)) => {
            cell.iterations = Some(rep.iterations);
            cell.inner_iterations = Some(rep.inner_iterations);
            cell.residual_final = Some(rep.residual_final);
            if !rep.converged {
                cell.status = CellStatus::NotConverged;
            }
        }
        Err(e) => {
            cell.status = CellStatus::SolveFailure;
            cell.message = Some(e.to_string());
        }
    }
    cell
}

/// Runs every (matrix, variant, n_svd) cell. Errors become cell codes;
/// only a malformed manifest aborts the run. Block Jacobi ignores `n_svd`
/// and runs once per matrix.
pub fn bench_run(man: &BenchManifest, base: &Path) -> Result<BenchReport> {
    let variants: Vec<Variant> = man
        .variants
        .iter()
        .map(|v| v.parse())
        .collect::<Result<_>>()?;
    let mut cells = Vec::new();
    for m in &man.matrices {
        let prep = match prepare_matrix(m, base) {
            Ok(p) => p,
            Err(e) => {
                for &v in &variants {
                    cells.push(BenchCell {
                        matrix: m.name.clone(),
                        variant: v.name().into(),
                        n_svd: 0,
                        p: m.p,
                        k: m.k.unwrap_or(0),
                        status: CellStatus::FactorFailure,
                        iterations: None,
                        inner_iterations: None,
                        residual_final: None,
                        reference: m.reference.get(v.name()).copied(),
                        message: Some(e.to_string()),
                    });
                }
                continue;
            }
        };
        let jobs: Vec<(Variant, usize)> = variants
            .iter()
            .flat_map(|&v| {
                let ranks = if v == Variant::BlockJacobi {
                    vec![0]
                } else {
                    man.n_svd.clone()
                };
                ranks.into_iter().map(move |r| (v, r))
            })
            .collect();
        cells.extend(map_partitions(Schedule::Parallel, jobs.len(), |j| {
            run_cell(&prep, m, jobs[j].0, jobs[j].1, man)
        }));
    }
    Ok(BenchReport {
        seed: man.seed,
        tol: man.tol,
        cells,
    })
}
