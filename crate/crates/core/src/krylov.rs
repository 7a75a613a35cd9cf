//! Right-preconditioned BiCGStab and preconditioned CG.
//!
//! Operators and preconditioners are closures over column blocks. Columns
//! of a multi-RHS block are independent Krylov iterations that share each
//! operator call; a column leaves the batch once it converges. Iterations
//! are counted in halves: every preconditioner application advances the
//! count by 0.5.
//!
//! Convergence is `||b - A x|| / ||b|| <= tol`, always confirmed against a
//! freshly computed residual. If the recursive residual passes but the true
//! one does not, the true residual replaces it and the iteration continues.

use std::fmt::Write as _;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::error::{Error, Result};
use crate::ledger::LedgerSnapshot;
use crate::sparse::DenseBlock;

#[derive(Debug, Clone)]
pub struct IterConfig {
    pub tol: f64,
    pub max_iters: usize,
    pub breakdown_eps: f64,
    pub initial_guess: Option<DenseBlock>,
    /// Record the iterate after every half-iteration.
    pub keep_iterates: bool,
    /// Drop a column, unconverged, after this many consecutive true-residual
    /// checks that fail both the tolerance and to halve the best true
    /// residual seen so far.
    pub stagnation_limit: Option<usize>,
}

impl Default for IterConfig {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iters: 500,
            breakdown_eps: 1e-30,
            initial_guess: None,
            keep_iterates: false,
            stagnation_limit: None,
        }
    }
}

impl IterConfig {
    pub fn new(tol: f64, max_iters: usize) -> Result<Self> {
        let cfg = Self {
            tol,
            max_iters,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "tol must be positive, got {}",
                self.tol
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter(
                "max_iters must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SolveReport {
    pub converged: bool,
    /// Outer iterations, in steps of 0.5.
    pub iterations: f64,
    /// Inner reduced-system iterations summed over all outer applications.
    pub inner_iterations: f64,
    /// Max relative residual over columns after every half-iteration; entry
    /// `i` belongs to iteration `i / 2`.
    pub residual_history: Vec<f64>,
    pub residual_final: f64,
    pub precond_applications: usize,
    pub matvecs: usize,
    pub comm: LedgerSnapshot,
    pub comm_scalars: u64,
    pub seed: Option<u64>,
    pub wall_time: f64,
    #[serde(skip)]
    pub iterates: Vec<DenseBlock>,
}

impl SolveReport {
    /// `iteration,relative_residual` rows, one per half-iteration.
    pub fn residual_csv(&self) -> String {
        let mut out = String::from("iteration,relative_residual\n");
        for (i, r) in self.residual_history.iter().enumerate() {
            let _ = writeln!(out, "{},{:e}", i as f64 / 2.0, r);
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum KrylovError {
    /// The recurrence broke down; `x` is the last iterate.
    #[error("breakdown ({what}) after {} iterations", report.iterations)]
    Breakdown {
        what: &'static str,
        x: DenseBlock,
        report: Box<SolveReport>,
    },
    #[error(transparent)]
    Operator(#[from] Error),
}

impl From<KrylovError> for Error {
    fn from(e: KrylovError) -> Self {
        match e {
            KrylovError::Breakdown { what, report, .. } => Error::Breakdown {
                what,
                iterations: report.iterations,
            },
            KrylovError::Operator(e) => e,
        }
    }
}

fn col_norms(m: &DenseBlock) -> Vec<f64> {
    m.column_iter().map(|c| c.norm()).collect()
}

fn check_shape(m: &DenseBlock, n: usize, cols: usize, context: &'static str) -> Result<()> {
    if m.nrows() != n || m.ncols() != cols {
        return Err(Error::DimensionMismatch {
            context,
            expected: n,
            got: m.nrows(),
        });
    }
    Ok(())
}

fn scatter(dst: &mut DenseBlock, idx: &[usize], src: &DenseBlock) {
    for (j, &c) in idx.iter().enumerate() {
        dst.set_column(c, &src.column(j));
    }
}

/// Recursive residual below which stagnation monitoring starts checking the
/// true residual once per decade of decrease.
const MONITOR_FLOOR: f64 = 1e-12;

/// Per-column bookkeeping shared by both drivers.
struct Tracker<'a> {
    b: &'a DenseBlock,
    bnorm: Vec<f64>,
    tol: f64,
    rel: Vec<f64>,
    done: Vec<Option<f64>>,
    best_true: Vec<f64>,
    best_x: Option<DenseBlock>,
    last_checked: Vec<f64>,
    misses: Vec<usize>,
    stagnation_limit: Option<usize>,
    report: SolveReport,
    start: Instant,
}

impl<'a> Tracker<'a> {
    fn new(b: &'a DenseBlock, cfg: &IterConfig) -> Self {
        let m = b.ncols();
        Self {
            b,
            bnorm: col_norms(b),
            tol: cfg.tol,
            rel: vec![0.0; m],
            done: vec![None; m],
            best_true: vec![f64::INFINITY; m],
            best_x: None,
            last_checked: vec![f64::INFINITY; m],
            misses: vec![0; m],
            stagnation_limit: cfg.stagnation_limit,
            report: SolveReport::default(),
            start: Instant::now(),
        }
    }

    fn relative(&self, c: usize, norm: f64) -> f64 {
        if self.bnorm[c] > 0.0 {
            norm / self.bnorm[c]
        } else {
            norm
        }
    }

    fn active(&self) -> Vec<usize> {
        (0..self.done.len())
            .filter(|&c| self.done[c].is_none() && !self.stalled(c))
            .collect()
    }

    fn stalled(&self, c: usize) -> bool {
        self.stagnation_limit.is_some_and(|l| self.misses[c] >= l)
    }

    fn push_history(&mut self) {
        let max = self.rel.iter().copied().fold(0.0, f64::max);
        self.report.residual_history.push(max);
    }

    /// For active columns whose recursive residual `r` passed, recomputes
    /// `b - A cand` and either marks them converged at `at` (copying the
    /// candidate into `x`) or replaces their residual with the true one.
    fn confirm<A>(
        &mut self,
        apply_a: &mut A,
        at: f64,
        idx: &[usize],
        cand: &DenseBlock,
        r: &mut DenseBlock,
        x: &mut DenseBlock,
    ) -> Result<()>
    where
        A: FnMut(&DenseBlock) -> Result<DenseBlock>,
    {
        let mut passed = Vec::new();
        let mut checked = Vec::new();
        for &c in idx {
            let rel = self.relative(c, r.column(c).norm());
            self.rel[c] = rel;
            let monitor = self.stagnation_limit.is_some()
                && rel <= MONITOR_FLOOR
                && rel <= 0.1 * self.last_checked[c];
            if rel <= self.tol || monitor {
                checked.push(c);
                passed.push(rel <= self.tol);
            }
        }
        if checked.is_empty() {
            return Ok(());
        }
        let xc = cand.select_columns(&checked);
        let ax = apply_a(&xc)?;
        check_shape(&ax, cand.nrows(), checked.len(), "operator output")?;
        self.report.matvecs += 1;
        let truth = self.b.select_columns(&checked) - ax;
        for (j, &c) in checked.iter().enumerate() {
            let rel = self.relative(c, truth.column(j).norm());
            self.last_checked[c] = self.rel[c];
            self.rel[c] = rel;
            if rel <= self.tol {
                self.done[c] = Some(at);
                r.set_column(c, &truth.column(j));
                x.set_column(c, &cand.column(c));
                continue;
            }
            if passed[j] {
                r.set_column(c, &truth.column(j));
            }
            if rel <= 0.5 * self.best_true[c] {
                self.misses[c] = 0;
            } else {
                self.misses[c] += 1;
            }
            if rel < self.best_true[c] {
                self.best_true[c] = rel;
                self.best_x
                    .get_or_insert_with(|| DenseBlock::zeros(cand.nrows(), cand.ncols()))
                    .set_column(c, &cand.column(c));
            }
            if self.stalled(c) {
                if let Some(best) = &self.best_x {
                    x.set_column(c, &best.column(c));
                }
                self.rel[c] = self.best_true[c];
            }
        }
        Ok(())
    }

    fn finish<A>(mut self, apply_a: &mut A, x: &DenseBlock) -> Result<SolveReport>
    where
        A: FnMut(&DenseBlock) -> Result<DenseBlock>,
    {
        let open: Vec<usize> = (0..self.done.len())
            .filter(|&c| self.done[c].is_none())
            .collect();
        if !open.is_empty() {
            let xc = x.select_columns(&open);
            let ax = apply_a(&xc)?;
            self.report.matvecs += 1;
            let truth = self.b.select_columns(&open) - ax;
            for (j, &c) in open.iter().enumerate() {
                self.rel[c] = self.relative(c, truth.column(j).norm());
            }
        }
        let final_rel = self.rel.iter().copied().fold(0.0, f64::max);
        if let Some(last) = self.report.residual_history.last_mut() {
            *last = final_rel;
        }
        self.report.residual_final = final_rel;
        self.report.converged = open.is_empty();
        // one history entry per half-iteration after the initial one
        let reached = self.report.residual_history.len().saturating_sub(1) as f64 / 2.0;
        self.report.iterations = self
            .done
            .iter()
            .map(|d| d.unwrap_or(reached))
            .fold(0.0, f64::max);
        self.report.wall_time = self.start.elapsed().as_secs_f64();
        Ok(self.report)
    }

    fn breakdown(mut self, what: &'static str, x: DenseBlock, at: f64) -> KrylovError {
        self.report.iterations = at;
        self.report.residual_final = self.rel.iter().copied().fold(0.0, f64::max);
        self.report.wall_time = self.start.elapsed().as_secs_f64();
        KrylovError::Breakdown {
            what,
            x,
            report: Box::new(self.report),
        }
    }
}

/// Initial iterate and residual; columns of `b` that are zero get `x = 0`.
fn initial_state<A>(
    apply_a: &mut A,
    b: &DenseBlock,
    cfg: &IterConfig,
    report: &mut SolveReport,
) -> Result<(DenseBlock, DenseBlock)>
where
    A: FnMut(&DenseBlock) -> Result<DenseBlock>,
{
    let (n, m) = b.shape();
    match &cfg.initial_guess {
        Some(x0) => {
            check_shape(x0, n, m, "initial guess")?;
            let ax = apply_a(x0)?;
            check_shape(&ax, n, m, "operator output")?;
            report.matvecs += 1;
            Ok((x0.clone(), b - ax))
        }
        None => Ok((DenseBlock::zeros(n, m), b.clone())),
    }
}

/// Right-preconditioned BiCGStab: solves `A M y = b`, `x = M y`.
pub fn bicgstab<A, M>(
    mut apply_a: A,
    mut apply_m: M,
    b: &DenseBlock,
    cfg: &IterConfig,
) -> std::result::Result<(DenseBlock, SolveReport), KrylovError>
where
    A: FnMut(&DenseBlock) -> Result<DenseBlock>,
    M: FnMut(&DenseBlock) -> Result<DenseBlock>,
{
    cfg.validate()?;
    let (n, m) = b.shape();
    let mut tr = Tracker::new(b, cfg);
    let (mut x, mut r) = initial_state(&mut apply_a, b, cfg, &mut tr.report)?;
    let all: Vec<usize> = (0..m).collect();
    let x_copy = x.clone();
    tr.confirm(&mut apply_a, 0.0, &all, &x_copy, &mut r, &mut x)?;
    tr.push_history();
    if cfg.keep_iterates {
        tr.report.iterates.push(x.clone());
    }

    let r_hat = r.clone();
    let mut p = DenseBlock::zeros(n, m);
    let mut v = DenseBlock::zeros(n, m);
    let mut h = x.clone();
    let mut s = DenseBlock::zeros(n, m);
    let mut rho_old = vec![1.0; m];
    let mut rho = vec![1.0; m];
    let mut alpha = vec![1.0; m];
    let mut omega = vec![1.0; m];
    let eps = cfg.breakdown_eps;

    for it in 1..=cfg.max_iters {
        let act = tr.active();
        if act.is_empty() {
            break;
        }
        let half = it as f64 - 0.5;
        for &c in &act {
            rho[c] = r_hat.column(c).dot(&r.column(c));
            if rho[c].abs() < eps * r_hat.column(c).norm() * r.column(c).norm() || rho[c] == 0.0 {
                return Err(tr.breakdown("rho", x, half - 0.5));
            }
            let beta = (rho[c] / rho_old[c]) * (alpha[c] / omega[c]);
            let pc = r.column(c) + (p.column(c) - v.column(c) * omega[c]) * beta;
            p.set_column(c, &pc);
        }
        let p_hat = apply_m(&p.select_columns(&act))?;
        check_shape(&p_hat, n, act.len(), "preconditioner output")?;
        tr.report.precond_applications += 1;
        let v_act = apply_a(&p_hat)?;
        check_shape(&v_act, n, act.len(), "operator output")?;
        tr.report.matvecs += 1;
        scatter(&mut v, &act, &v_act);
        for (j, &c) in act.iter().enumerate() {
            let denom = r_hat.column(c).dot(&v.column(c));
            if denom.abs() < eps * r_hat.column(c).norm() * v.column(c).norm() || denom == 0.0 {
                return Err(tr.breakdown("rho", x, half - 0.5));
            }
            alpha[c] = rho[c] / denom;
            h.set_column(c, &(x.column(c) + p_hat.column(j) * alpha[c]));
            s.set_column(c, &(r.column(c) - v.column(c) * alpha[c]));
        }
        tr.confirm(&mut apply_a, half, &act, &h, &mut s, &mut x)?;
        for &c in &act {
            if tr.done[c].is_some() {
                r.set_column(c, &s.column(c));
            }
        }
        tr.push_history();
        if cfg.keep_iterates {
            let mut snap = x.clone();
            for &c in &act {
                if tr.done[c].is_none() {
                    snap.set_column(c, &h.column(c));
                }
            }
            tr.report.iterates.push(snap);
        }

        let act = tr.active();
        if act.is_empty() {
            break;
        }
        let s_hat = apply_m(&s.select_columns(&act))?;
        check_shape(&s_hat, n, act.len(), "preconditioner output")?;
        tr.report.precond_applications += 1;
        let t = apply_a(&s_hat)?;
        check_shape(&t, n, act.len(), "operator output")?;
        tr.report.matvecs += 1;
        for (j, &c) in act.iter().enumerate() {
            let tt = t.column(j).dot(&t.column(j));
            omega[c] = if tt > 0.0 {
                t.column(j).dot(&s.column(c)) / tt
            } else {
                0.0
            };
            if omega[c].abs() < eps {
                x.set_column(c, &h.column(c));
                return Err(tr.breakdown("omega", x, half));
            }
            x.set_column(c, &(h.column(c) + s_hat.column(j) * omega[c]));
            r.set_column(c, &(s.column(c) - t.column(j) * omega[c]));
            rho_old[c] = rho[c];
        }
        let x_cand = x.clone();
        tr.confirm(&mut apply_a, it as f64, &act, &x_cand, &mut r, &mut x)?;
        tr.push_history();
        if cfg.keep_iterates {
            tr.report.iterates.push(x.clone());
        }
    }
    let report = tr.finish(&mut apply_a, &x)?;
    Ok((x, report))
}

/// Preconditioned conjugate gradients for symmetric positive definite `A`
/// and `M`. Each step applies the preconditioner once and counts as half an
/// iteration.
pub fn cg<A, M>(
    mut apply_a: A,
    mut apply_m: M,
    b: &DenseBlock,
    cfg: &IterConfig,
) -> std::result::Result<(DenseBlock, SolveReport), KrylovError>
where
    A: FnMut(&DenseBlock) -> Result<DenseBlock>,
    M: FnMut(&DenseBlock) -> Result<DenseBlock>,
{
    cfg.validate()?;
    let (n, m) = b.shape();
    let mut tr = Tracker::new(b, cfg);
    let (mut x, mut r) = initial_state(&mut apply_a, b, cfg, &mut tr.report)?;
    let all: Vec<usize> = (0..m).collect();
    let x_copy = x.clone();
    tr.confirm(&mut apply_a, 0.0, &all, &x_copy, &mut r, &mut x)?;
    tr.push_history();
    if cfg.keep_iterates {
        tr.report.iterates.push(x.clone());
    }

    let mut p = DenseBlock::zeros(n, m);
    let mut rz = vec![0.0; m];
    let act = tr.active();
    if !act.is_empty() {
        let z = apply_m(&r.select_columns(&act))?;
        check_shape(&z, n, act.len(), "preconditioner output")?;
        tr.report.precond_applications += 1;
        for (j, &c) in act.iter().enumerate() {
            p.set_column(c, &z.column(j));
            rz[c] = r.column(c).dot(&z.column(j));
        }
    }

    for step in 1..=2 * cfg.max_iters {
        let act = tr.active();
        if act.is_empty() {
            break;
        }
        let at = step as f64 / 2.0;
        let q = apply_a(&p.select_columns(&act))?;
        check_shape(&q, n, act.len(), "operator output")?;
        tr.report.matvecs += 1;
        for (j, &c) in act.iter().enumerate() {
            let pq = p.column(c).dot(&q.column(j));
            if pq.abs() < cfg.breakdown_eps || rz[c].abs() < cfg.breakdown_eps {
                return Err(tr.breakdown("curvature", x, at - 0.5));
            }
            let alpha = rz[c] / pq;
            x.set_column(c, &(x.column(c) + p.column(c) * alpha));
            r.set_column(c, &(r.column(c) - q.column(j) * alpha));
        }
        let x_cand = x.clone();
        tr.confirm(&mut apply_a, at, &act, &x_cand, &mut r, &mut x)?;
        tr.push_history();
        if cfg.keep_iterates {
            tr.report.iterates.push(x.clone());
        }
        let act = tr.active();
        if act.is_empty() || step == 2 * cfg.max_iters {
            break;
        }
        let z = apply_m(&r.select_columns(&act))?;
        check_shape(&z, n, act.len(), "preconditioner output")?;
        tr.report.precond_applications += 1;
        for (j, &c) in act.iter().enumerate() {
            let rz_new = r.column(c).dot(&z.column(j));
            let beta = rz_new / rz[c];
            rz[c] = rz_new;
            p.set_column(c, &(z.column(j) + p.column(c) * beta));
        }
    }
    let report = tr.finish(&mut apply_a, &x)?;
    Ok((x, report))
}
