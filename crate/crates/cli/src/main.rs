//! `lrspike` command-line driver.
//!
//! Every subcommand writes JSON (and CSV where the data is tabular) and
//! takes `--seed`. Studies and benchmarks exit 0 once they complete, with
//! failed cells recorded in the output; only unusable input is an error.

mod source;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lrspike::mm::{
    read_dense_matrix_market, read_matrix_market, write_dense_matrix_market, write_matrix_market,
};
use lrspike::reorder::{ReorderReport, Reordering};
use lrspike::solver::{factorize, SolveSummary, SolverConfig, SpikeSvd, Timings, Variant};
use lrspike::study::{bench_run, condition_study, svd_decay_study, BenchManifest, ConditionGrid};
use lrspike::{DenseBlock, Schedule};
use serde::Serialize;

use crate::source::MatrixSource;

#[derive(Parser)]
#[command(
    name = "lrspike",
    version,
    about = "Low-rank SPIKE solvers, studies and benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Strip, scale and RCM-reorder a matrix; report band metrics.
    Reorder(ReorderArgs),
    /// Solve `A x = f` with one preconditioner variant.
    Solve(SolveArgs),
    /// Exact condition numbers of the preconditioned operators over a grid.
    PrecondStudy(PrecondStudyArgs),
    /// Normalized singular values of spikes and couplings per partition.
    SvdStudy(SvdStudyArgs),
    /// Run a benchmark manifest (TOML) and emit a table of iterations.
    Bench(BenchArgs),
}

#[derive(Args)]
struct ReorderArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON report; stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Recorded in the report; the pipeline itself is deterministic.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SvdArgs {
    /// Use dense SVDs of explicit spikes instead of the randomized one.
    #[arg(long)]
    exact_svd: bool,
    /// Extra randomized samples; defaults to ceil(n_svd / 2).
    #[arg(long)]
    oversample: Option<usize>,
    /// Randomized passes over the spike; at least 2, odd values round down.
    #[arg(long, default_value_t = 2)]
    passes: usize,
}

impl SvdArgs {
    fn spike_svd(&self) -> SpikeSvd {
        if self.exact_svd {
            SpikeSvd::Exact
        } else {
            SpikeSvd::Randomized {
                oversample: self.oversample,
                passes: self.passes,
            }
        }
    }
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    source: MatrixSource,
    /// Right-hand side: `ones` or a dense Matrix Market file.
    #[arg(long, default_value = "ones")]
    rhs: String,
    /// One of t, i, otf, bj.
    #[arg(long, default_value = "t")]
    variant: Variant,
    #[arg(short = 'p', default_value_t = 3)]
    p: usize,
    /// Coupling size; the matrix bandwidth when absent.
    #[arg(short = 'k')]
    k: Option<usize>,
    #[arg(long, default_value_t = 8)]
    nsvd: usize,
    #[arg(long, default_value_t = 1e-7)]
    tol: f64,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    svd: SvdArgs,
    /// Run partitions one after another.
    #[arg(long)]
    sequential: bool,
    /// Round block-solve outputs to single precision.
    #[arg(long)]
    single_precision: bool,
    /// JSON report; stdout when absent.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Residual history as CSV.
    #[arg(long)]
    history: Option<PathBuf>,
    /// Solution as a dense Matrix Market file, in the input numbering.
    #[arg(long)]
    solution: Option<PathBuf>,
}

#[derive(Args)]
struct PrecondStudyArgs {
    #[command(flatten)]
    source: MatrixSource,
    /// Partition counts.
    #[arg(short = 'p', value_delimiter = ',', default_value = "2,3,4")]
    p: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0,2,4,8")]
    nsvd: Vec<usize>,
    #[arg(short = 'k')]
    k: Option<usize>,
    #[arg(long)]
    exact_svd: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SvdStudyArgs {
    #[command(flatten)]
    source: MatrixSource,
    #[arg(short = 'p', default_value_t = 3)]
    p: usize,
    #[arg(short = 'k')]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON report; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// TOML manifest; matrix paths are relative to it.
    #[arg(long)]
    manifest: PathBuf,
    /// Overrides the manifest seed.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON report; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::init();
    match Cli::parse().command {
        Command::Reorder(a) => reorder(a),
        Command::Solve(a) => solve(a),
        Command::PrecondStudy(a) => precond_study(a),
        Command::SvdStudy(a) => svd_study(a),
        Command::Bench(a) => bench(a),
    }
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn write_json(path: Option<&Path>, value: &impl Serialize) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(value)?)
}

#[derive(Serialize)]
struct ReorderOutput {
    seed: u64,
    #[serde(flatten)]
    report: ReorderReport,
}

fn reorder(args: ReorderArgs) -> Result<()> {
    let a = read_matrix_market(&args.input)?;
    let r = Reordering::new(&a)?;
    if let Some(out) = &args.out {
        write_matrix_market(out, &r.matrix)?;
    }
    let output = ReorderOutput {
        seed: args.seed,
        report: r.report(&a)?,
    };
    write_json(args.report.as_deref(), &output)
}

#[derive(Serialize)]
struct SolveOutput {
    matrix: String,
    status: &'static str,
    #[serde(flatten)]
    summary: Option<SolveSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn solve(args: SolveArgs) -> Result<()> {
    let loaded = args.source.load()?;
    let n_original = loaded.original_rows;
    let f_original = match args.rhs.as_str() {
        "ones" => DenseBlock::from_element(n_original, 1, 1.0),
        path => read_dense_matrix_market(path)?,
    };
    let f = loaded.map_rhs(&f_original);
    let k = match args.k {
        Some(k) => k,
        None => loaded.matrix.band_metrics()?.band.k.max(1),
    };
    let mut cfg = SolverConfig::new(args.variant, args.p, k, args.nsvd.min(k));
    cfg.outer.tol = args.tol;
    cfg.outer.max_iters = args.max_iters;
    cfg.seed = args.seed;
    cfg.svd = args.svd.spike_svd();
    cfg.single_precision = args.single_precision;
    if args.sequential {
        cfg.schedule = Schedule::Sequential;
    }

    let mut output = SolveOutput {
        matrix: loaded.name.clone(),
        status: "OK",
        summary: None,
        error: None,
    };
    let start = Instant::now();
    let outcome = factorize(&loaded.matrix, &cfg)
        .map_err(|e| ("FF", e))
        .and_then(|fact| {
            let factorize_time = start.elapsed().as_secs_f64();
            let solve_start = Instant::now();
            let (x, rep) = fact.solve(&loaded.matrix, &f).map_err(|e| ("SF", e))?;
            let timings = Timings {
                factorize: factorize_time,
                solve: solve_start.elapsed().as_secs_f64(),
            };
            Ok((x, rep, fact.n_svd_used, timings))
        });
    match outcome {
        Ok((x, rep, n_svd_used, timings)) => {
            if !rep.converged {
                output.status = "NC";
            }
            output.summary = Some(SolveSummary::new(&cfg, n_svd_used, &rep, timings));
            if let Some(h) = &args.history {
                fs::write(h, rep.residual_csv())?;
            }
            if let Some(s) = &args.solution {
                write_dense_matrix_market(s, &loaded.unmap_solution(&x, &f_original))?;
            }
        }
        Err((code, e)) => {
            output.status = code;
            output.error = Some(e.to_string());
        }
    }
    write_json(args.report.as_deref(), &output)
}

fn precond_study(args: PrecondStudyArgs) -> Result<()> {
    let loaded = args.source.load()?;
    let grid = ConditionGrid {
        p: args.p,
        n_svd: args.nsvd,
        k: args.k,
        seed: args.seed,
        exact_svd: args.exact_svd,
    };
    let study = condition_study(&loaded.matrix, loaded.provenance(args.seed), &grid)?;
    if let Some(csv) = &args.csv {
        fs::write(csv, study.to_csv())?;
    }
    write_json(args.out.as_deref(), &study)
}

fn svd_study(args: SvdStudyArgs) -> Result<()> {
    let loaded = args.source.load()?;
    let k = match args.k {
        Some(k) => k,
        None => loaded.matrix.band_metrics()?.band.k.max(1),
    };
    let study = svd_decay_study(&loaded.matrix, args.p, k, loaded.provenance(args.seed))?;
    if let Some(csv) = &args.csv {
        fs::write(csv, study.to_csv())?;
    }
    write_json(args.out.as_deref(), &study)
}

fn bench(args: BenchArgs) -> Result<()> {
    let text = fs::read_to_string(&args.manifest)
        .with_context(|| format!("reading {}", args.manifest.display()))?;
    let mut manifest: BenchManifest = toml::from_str(&text).context("parsing bench manifest")?;
    if let Some(seed) = args.seed {
        manifest.seed = seed;
    }
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let report = bench_run(&manifest, base)?;
    if let Some(csv) = &args.csv {
        fs::write(csv, report.to_csv())?;
    }
    write_json(args.out.as_deref(), &report)
}
