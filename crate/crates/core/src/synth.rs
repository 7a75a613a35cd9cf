//! Seeded synthetic test matrices.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::partition::PartitionLayout;
use crate::sparse::CsrMatrix;

pub fn tridiagonal(n: usize, sub: f64, diag: f64, sup: f64) -> CsrMatrix {
    let mut t = Vec::with_capacity(3 * n);
    for i in 0..n {
        if i > 0 {
            t.push((i, i - 1, sub));
        }
        t.push((i, i, diag));
        if i + 1 < n {
            t.push((i, i + 1, sup));
        }
    }
    CsrMatrix::from_triplets(n, n, &t).expect("in range")
}

/// 5-point Laplacian on an `nx x ny` grid, natural (row-major) ordering.
pub fn laplacian_2d(nx: usize, ny: usize) -> CsrMatrix {
    let n = nx * ny;
    let idx = |x: usize, y: usize| y * nx + x;
    let mut t = Vec::with_capacity(5 * n);
    for y in 0..ny {
        for x in 0..nx {
            let i = idx(x, y);
            t.push((i, i, 4.0));
            if x > 0 {
                t.push((i, idx(x - 1, y), -1.0));
            }
            if x + 1 < nx {
                t.push((i, idx(x + 1, y), -1.0));
            }
            if y > 0 {
                t.push((i, idx(x, y - 1), -1.0));
            }
            if y + 1 < ny {
                t.push((i, idx(x, y + 1), -1.0));
            }
        }
    }
    CsrMatrix::from_triplets(n, n, &t).expect("in range")
}

/// Dense-in-band matrix with half-bandwidth `k`. Off-diagonal entries are
/// uniform in `[-1, 1]` (never zero); each diagonal entry is `dominance`
/// times its row's off-diagonal absolute sum, with a random sign.
pub fn random_banded(n: usize, k: usize, dominance: f64, rng: &mut impl Rng) -> CsrMatrix {
    let mut t = Vec::with_capacity(n * (2 * k + 1));
    for i in 0..n {
        let lo = i.saturating_sub(k);
        let hi = (i + k).min(n - 1);
        let mut sum = 0.0;
        for j in lo..=hi {
            if j != i {
                let mut v: f64 = rng.random_range(-1.0..1.0);
                if v.abs() < 1e-3 {
                    v = 1e-3f64.copysign(v);
                }
                sum += v.abs();
                t.push((i, j, v));
            }
        }
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        t.push((i, i, sign * dominance * sum.max(1.0)));
    }
    CsrMatrix::from_triplets(n, n, &t).expect("in range")
}

/// Symmetric positive definite banded matrix (diagonally dominant, positive
/// diagonal).
pub fn random_banded_spd(n: usize, k: usize, dominance: f64, rng: &mut impl Rng) -> CsrMatrix {
    let mut upper = Vec::new();
    for i in 0..n {
        for j in i + 1..=(i + k).min(n - 1) {
            upper.push((i, j, rng.random_range(-1.0..1.0)));
        }
    }
    let mut rowsum = vec![0.0f64; n];
    let mut t = Vec::with_capacity(2 * upper.len() + n);
    for &(i, j, v) in &upper {
        rowsum[i] += f64::abs(v);
        rowsum[j] += f64::abs(v);
        t.push((i, j, v));
        t.push((j, i, v));
    }
    for (i, s) in rowsum.iter().enumerate() {
        t.push((i, i, dominance * s.max(1.0)));
    }
    CsrMatrix::from_triplets(n, n, &t).expect("in range")
}

/// Random pattern with the given off-diagonal density and a dominant
/// diagonal, so the matrix is nonsingular.
pub fn random_sparse_nonsingular(n: usize, density: f64, rng: &mut impl Rng) -> CsrMatrix {
    let mut t = Vec::new();
    let mut rowsum = vec![0.0f64; n];
    for (i, sum) in rowsum.iter_mut().enumerate() {
        for j in 0..n {
            if i != j && rng.random::<f64>() < density {
                let v: f64 = rng.random_range(-1.0..1.0);
                *sum += v.abs();
                t.push((i, j, v));
            }
        }
    }
    for (i, s) in rowsum.iter().enumerate() {
        t.push((i, i, 1.5 * s + 1.0));
    }
    CsrMatrix::from_triplets(n, n, &t).expect("in range")
}

/// Block-diagonal matrix matching `layout`: each block is a tridiagonal
/// with bandwidth `k` clipped to the block.
pub fn block_diagonal(layout: &PartitionLayout, k: usize) -> CsrMatrix {
    let mut t = Vec::new();
    for i in 0..layout.p() {
        let o = layout.offset(i);
        let s = layout.size(i);
        for r in 0..s {
            t.push((o + r, o + r, 4.0 + r as f64 * 0.01));
            for d in 1..=k {
                if r + d < s {
                    t.push((o + r, o + r + d, -1.0 / d as f64));
                    t.push((o + r + d, o + r, -0.5 / d as f64));
                }
            }
        }
    }
    let n = layout.n();
    CsrMatrix::from_triplets(n, n, &t).expect("in range")
}

/// Heterogeneous 3-D convection-diffusion operator on an `nx x ny x nz`
/// grid (7-point stencil, natural ordering), nonsymmetric and not
/// diagonally dominant. Cell permeabilities are log-normal with standard
/// deviation `log_perm_std`, a constant drift of strength `peclet` is
/// upwinded along x, and the diagonal is scaled by `1 + shift`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reservoir {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub log_perm_std: f64,
    pub peclet: f64,
    pub shift: f64,
}

impl Reservoir {
    pub fn n(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn build(&self, rng: &mut impl Rng) -> CsrMatrix {
        let Reservoir {
            nx,
            ny,
            nz,
            log_perm_std,
            peclet,
            shift,
        } = *self;
        let n = self.n();
        let idx = |x: usize, y: usize, z: usize| (z * ny + y) * nx + x;
        let perm: Vec<f64> = (0..n)
            .map(|_| {
                let g: f64 = StandardNormal.sample(rng);
                (log_perm_std * g).exp()
            })
            .collect();
        let mut t = Vec::with_capacity(7 * n);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = idx(x, y, z);
                    let mut neighbours = Vec::with_capacity(6);
                    if x > 0 {
                        neighbours.push((idx(x - 1, y, z), peclet));
                    }
                    if x + 1 < nx {
                        neighbours.push((idx(x + 1, y, z), 0.0));
                    }
                    if y > 0 {
                        neighbours.push((idx(x, y - 1, z), 0.0));
                    }
                    if y + 1 < ny {
                        neighbours.push((idx(x, y + 1, z), 0.0));
                    }
                    if z > 0 {
                        neighbours.push((idx(x, y, z - 1), 0.0));
                    }
                    if z + 1 < nz {
                        neighbours.push((idx(x, y, z + 1), 0.0));
                    }
                    let mut diag = 0.0;
                    for (j, drift) in neighbours {
                        // harmonic mean transmissibility
                        let tr = 2.0 * perm[i] * perm[j] / (perm[i] + perm[j]);
                        t.push((i, j, -tr - drift));
                        diag += tr + drift;
                    }
                    t.push((i, i, diag * (1.0 + shift)));
                }
            }
        }
        CsrMatrix::from_triplets(n, n, &t).expect("in range")
    }
}
