//! Seeded property checks across modules, each against a dense oracle.

use std::io::Cursor;
use std::path::Path;

use lrspike::krylov::{bicgstab, cg, IterConfig};
use lrspike::ledger::CommLedger;
use lrspike::lu::BlockFactor;
use lrspike::mm::{parse_matrix_market, write_matrix_market_to};
use lrspike::reduced::{matvec_exact, matvec_lowrank, matvec_otf, InterfaceSpikes, ReducedVector};
use lrspike::reorder::{diagonal_scale, Permutation, Reordering};
use lrspike::solver::{factorize, SolverConfig, SpikeSvd, Variant};
use lrspike::spikes::{
    coupling_svd_approximation, randomized_spike_svd, spike_rng, FullSpike, LowRankSpike, Side,
    SvdParams,
};
use lrspike::study::{condition_study, ConditionGrid, ConditionStudy, Provenance};
use lrspike::{synth, CsrMatrix, DenseBlock, PartitionBlocks, PartitionLayout, Schedule};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_block(rows: usize, cols: usize, seed: u64) -> DenseBlock {
    let mut r = rng(seed);
    DenseBlock::from_fn(rows, cols, |_, _| r.random::<f64>() - 0.5)
}

fn split(a: &CsrMatrix, p: usize, k: usize) -> (PartitionBlocks, Vec<BlockFactor>) {
    let layout = PartitionLayout::new(a.n_rows(), p, k).unwrap();
    let blocks = PartitionBlocks::extract(a, &layout).unwrap();
    let factors = blocks
        .diag
        .iter()
        .map(|d| BlockFactor::factorize(d).unwrap())
        .collect();
    (blocks, factors)
}

fn rel(a: &DenseBlock, b: &DenseBlock) -> f64 {
    (a - b).norm() / b.norm().max(f64::MIN_POSITIVE)
}

fn orthonormal_columns(m: &DenseBlock) -> bool {
    let g = m.transpose() * m;
    (g - DenseBlock::identity(m.ncols(), m.ncols())).amax() <= 1e-12
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matrix_market_round_trip_is_bit_exact(n in 2usize..60, density in 0.02f64..0.3, seed: u64) {
        let a = synth::random_sparse_nonsingular(n, density, &mut rng(seed));
        let mut buf = Vec::new();
        write_matrix_market_to(&mut buf, &a).unwrap();
        let b = parse_matrix_market(Cursor::new(buf), Path::new("memory")).unwrap();
        prop_assert_eq!(a.row_ptr(), b.row_ptr());
        prop_assert_eq!(a.col_idx(), b.col_idx());
        prop_assert_eq!(a.values(), b.values());
    }

    #[test]
    fn spmv_matches_dense(n in 1usize..200, density in 0.01f64..0.5, seed: u64) {
        let a = synth::random_sparse_nonsingular(n, density, &mut rng(seed));
        let x = random_block(n, 2, seed ^ 1);
        let expect = a.to_dense() * &x;
        prop_assert!(rel(&a.spmv(&x, None).unwrap(), &expect) <= 1e-14);
    }

    #[test]
    fn pipeline_narrows_band_and_solution_maps_back(n in 10usize..150, seed: u64) {
        let a = synth::random_sparse_nonsingular(n, 0.05, &mut rng(seed));
        let r = Reordering::new(&a).unwrap();
        let m = &r.matrix;
        if m.n_rows() > 1 && m.nnz() > m.n_rows() {
            prop_assert!(m.band_metrics().unwrap().band.k < m.n_rows());
        }
        let f = random_block(n, 1, seed ^ 2);
        let x_true = a.to_dense().lu().solve(&f).unwrap();
        let z = m.to_dense().lu().solve(&r.map_rhs(&f)).unwrap();
        let x = r.unmap_solution(&z, &f);
        prop_assert!((&x - &x_true).norm() / x_true.norm() <= 1e-10);
    }

    #[test]
    fn identity_permutation_keeps_band(n in 2usize..80, seed: u64) {
        let a = synth::random_sparse_nonsingular(n, 0.1, &mut rng(seed));
        let id = Permutation::identity(n);
        let b = lrspike::reorder::apply_permutation(&a, &id, &id).unwrap();
        prop_assert_eq!(a.band_metrics().unwrap(), b.band_metrics().unwrap());
    }

    #[test]
    fn diagonal_scaling_is_idempotent(n in 2usize..80, seed: u64) {
        let a = synth::random_sparse_nonsingular(n, 0.1, &mut rng(seed));
        let (once, _, _) = diagonal_scale(&a).unwrap();
        let (twice, _, _) = diagonal_scale(&once).unwrap();
        prop_assert!(rel(&twice.to_dense(), &once.to_dense()) <= 1e-14);
    }

    #[test]
    fn partition_reassembles_bit_exact(p in 2usize..6, k in 1usize..8, extra in 0usize..40, seed: u64) {
        let n = 2 * k * p + extra;
        let a = synth::random_banded(n, k, 1.2, &mut rng(seed));
        let (blocks, _) = split(&a, p, k);
        let b = blocks.assemble();
        prop_assert_eq!(a.row_ptr(), b.row_ptr());
        prop_assert_eq!(a.col_idx(), b.col_idx());
        prop_assert_eq!(a.values(), b.values());
        // A coupling smaller than the band must be rejected.
        if k > 1 {
            let narrow = PartitionLayout::new(n, p, k - 1).unwrap();
            prop_assert!(PartitionBlocks::extract(&a, &narrow).is_err());
        }
    }

    #[test]
    fn block_solves_are_accurate_and_columnwise(n in 2usize..120, k in 1usize..6, seed: u64) {
        let k = k.min(n - 1).max(1);
        let a = synth::random_banded(n, k, 1.1, &mut rng(seed));
        let f = BlockFactor::factorize(&a).unwrap();
        let rhs = random_block(n, 4, seed ^ 3);
        let x = f.solve(&rhs).unwrap();
        prop_assert!((a.to_dense() * &x - &rhs).norm() / rhs.norm() <= 1e-10);
        for c in 0..4 {
            let xc = f.solve(&rhs.columns(c, 1).into_owned()).unwrap();
            prop_assert_eq!(xc.column(0), x.column(c));
        }
    }

    #[test]
    fn spike_svd_beats_coupling_svd(k in 2usize..10, extra in 0usize..60, dominance in 1.0f64..3.0, seed: u64) {
        let n = 4 * k + extra;
        let a = synth::random_banded(n, k, dominance, &mut rng(seed));
        let (blocks, factors) = split(&a, 2, k);
        let spike = FullSpike::compute(&factors[0], &blocks.upper[0], Side::Right).unwrap();
        for r in [1, k / 4, k / 2].into_iter().filter(|&r| r >= 1) {
            let lr = LowRankSpike::from_full(&spike, r);
            prop_assert!(orthonormal_columns(&lr.u));
            prop_assert!(orthonormal_columns(&lr.v.transpose()));
            let spike_err = (&spike.values - lr.to_dense()).norm();
            let coupling = coupling_svd_approximation(&factors[0], &blocks.upper[0], Side::Right, r).unwrap();
            let coupling_err = (&spike.values - coupling).norm();
            prop_assert!(spike_err <= coupling_err + 1e-12 * spike.values.norm());
        }
    }

    #[test]
    fn randomized_svd_is_reproducible(k in 2usize..10, seed: u64) {
        let a = synth::random_banded(6 * k, k, 1.3, &mut rng(seed));
        let (blocks, factors) = split(&a, 2, k);
        let params = SvdParams::with_defaults(k / 2 + 1, k);
        let run = || randomized_spike_svd(&factors[1], &blocks.lower[0], Side::Left, params, &mut spike_rng(seed, 1, Side::Left)).unwrap();
        let (x, y) = (run(), run());
        prop_assert_eq!(&x.u, &y.u);
        prop_assert_eq!(&x.sigma, &y.sigma);
        prop_assert_eq!(&x.v, &y.v);
        prop_assert!(orthonormal_columns(&x.u));
        prop_assert!(orthonormal_columns(&x.v.transpose()));
    }

    #[test]
    fn reduced_products_agree(p in 2usize..7, k in 1usize..8, seed: u64) {
        let n = (3 * k * p).min(400);
        let a = synth::random_banded(n, k, 1.0, &mut rng(seed));
        let (blocks, factors) = split(&a, p, k);
        let full = InterfaceSpikes::compute_full(&blocks, &factors, Schedule::Sequential).unwrap();
        let x = ReducedVector::from_block(p, k, random_block(2 * k * p, 2, seed ^ 4)).unwrap();
        let ledger = CommLedger::new();
        let exact = matvec_exact(&full, &x, &ledger, Schedule::Sequential).unwrap();
        let otf = matvec_otf(&blocks, &factors, &x, &ledger, Schedule::Parallel).unwrap();
        let spike_part = exact.as_block() - x.as_block();
        prop_assert!(rel(&(otf.as_block() - x.as_block()), &spike_part) <= 1e-11);

        // Truncation error is bounded by the largest dropped singular value.
        for r in 0..=k {
            let low = matvec_lowrank(&full.truncated(r), &x, &ledger, Schedule::Sequential).unwrap();
            let dropped = full
                .t
                .iter()
                .chain(&full.w)
                .map(|s| {
                    let sv = s.values.clone().svd(false, false).singular_values;
                    let mut sv: Vec<f64> = sv.iter().copied().collect();
                    sv.sort_by(|a, b| b.total_cmp(a));
                    sv.get(r).copied().unwrap_or(0.0)
                })
                .fold(0.0, f64::max);
            let err = (low.as_block() - exact.as_block()).norm();
            prop_assert!(err <= 10.0 * dropped * x.as_block().norm() * p as f64 + 1e-12);
        }
    }

    #[test]
    fn krylov_reports_true_residual_and_is_deterministic(n in 4usize..60, seed: u64) {
        let a = synth::random_banded_spd(n, 3.min(n - 1), 1.5, &mut rng(seed));
        let ad = a.to_dense();
        let b = random_block(n, 1, seed ^ 5);
        let cfg = IterConfig::new(1e-9, 400).unwrap();
        let op = |x: &DenseBlock| Ok(&ad * x);
        let id = |x: &DenseBlock| Ok(x.clone());
        let (x1, r1) = bicgstab(op, id, &b, &cfg).unwrap();
        let (x2, r2) = bicgstab(op, id, &b, &cfg).unwrap();
        prop_assert_eq!(&x1, &x2);
        prop_assert_eq!(&r1.residual_history, &r2.residual_history);
        let truth = (&b - &ad * &x1).norm() / b.norm();
        prop_assert!((r1.residual_final - truth).abs() <= 1e-13);
        let expect = (2.0 * r1.iterations).ceil() as usize;
        prop_assert_eq!(r1.precond_applications, expect);

        let (y1, c1) = cg(op, id, &b, &cfg).unwrap();
        let (y2, _) = cg(op, id, &b, &cfg).unwrap();
        prop_assert_eq!(&y1, &y2);
        prop_assert!((c1.residual_final - (&b - &ad * &y1).norm() / b.norm()).abs() <= 1e-13);
    }
}

#[test]
fn variant_ordering_holds_in_the_median() {
    let (p, k) = (4, 8);
    let mut counts = [Vec::new(), Vec::new(), Vec::new()];
    for seed in 0..12u64 {
        let a = synth::random_banded(p * 4 * k, k, 0.9, &mut rng(7000 + seed));
        let f = DenseBlock::from_element(a.n_rows(), 1, 1.0);
        for (slot, variant) in [Variant::I, Variant::T, Variant::BlockJacobi]
            .into_iter()
            .enumerate()
        {
            let n_svd = if variant == Variant::BlockJacobi {
                0
            } else {
                k / 4
            };
            let mut cfg = SolverConfig::new(variant, p, k, n_svd);
            cfg.seed = seed;
            let iters = factorize(&a, &cfg)
                .and_then(|fact| fact.solve(&a, &f))
                .map(|(_, rep)| {
                    if rep.converged {
                        rep.iterations
                    } else {
                        f64::INFINITY
                    }
                })
                .unwrap_or(f64::INFINITY);
            counts[slot].push(iters);
        }
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let [i, t, bj] = counts.map(|mut v| median(&mut v));
    assert!(i <= t && t <= bj, "medians I {i}, T {t}, BJ {bj}");
}

#[test]
fn otf_converged_means_true_residual_below_tol() {
    let mut converged = 0;
    for seed in 0..6u64 {
        let a = synth::random_banded(240, 6, 0.8, &mut rng(8000 + seed));
        let cfg = SolverConfig::new(Variant::Otf, 3, 6, 2);
        let f = random_block(240, 2, seed);
        let Ok((x, rep, _)) = lrspike::solver::solve(&a, &f, &cfg) else {
            continue;
        };
        if rep.converged {
            converged += 1;
            let r = &f - a.spmv(&x, None).unwrap();
            for c in 0..2 {
                assert!(r.column(c).norm() / f.column(c).norm() <= cfg.outer.tol);
            }
        }
    }
    assert!(converged >= 3, "only {converged} OTF solves converged");
}

#[test]
fn full_rank_condition_is_one_and_study_reruns_from_provenance() {
    let k = 4;
    let a = synth::random_banded(96, k, 1.2, &mut rng(11));
    let prov = Provenance {
        matrix: "random_banded(96, 4, 1.2)".into(),
        pipeline: "none".into(),
        seed: 11,
    };
    let grid = ConditionGrid {
        p: vec![2, 3],
        n_svd: vec![0, 2, k],
        k: Some(k),
        seed: 5,
        exact_svd: true,
    };
    let study = condition_study(&a, prov, &grid).unwrap();
    for cell in study.cells.iter().filter(|c| c.n_svd == k) {
        assert!(cell.lr_spike_i.unwrap() <= 1.0 + 1e-6, "{cell:?}");
    }
    let json = serde_json::to_string(&study).unwrap();
    let back: ConditionStudy = serde_json::from_str(&json).unwrap();
    let rerun = condition_study(&a, back.provenance, &back.grid).unwrap();
    assert_eq!(serde_json::to_string(&rerun).unwrap(), json);
}

#[test]
fn exact_and_randomized_spikes_agree_at_full_rank() {
    let k = 5;
    let a = synth::random_banded(90, k, 1.1, &mut rng(12));
    let f = DenseBlock::from_element(90, 1, 1.0);
    let mut reports = Vec::new();
    for svd in [
        SpikeSvd::Exact,
        SpikeSvd::Randomized {
            oversample: None,
            passes: 2,
        },
    ] {
        let mut cfg = SolverConfig::new(Variant::T, 3, k, k);
        cfg.svd = svd;
        let fact = factorize(&a, &cfg).unwrap();
        reports.push(fact.solve(&a, &f).unwrap().1);
    }
    assert!(reports.iter().all(|r| r.converged));
    assert!((reports[0].iterations - reports[1].iterations).abs() <= 1.0);
}
