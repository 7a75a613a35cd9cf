//! Banded, unit-diagonal form of a general sparse matrix.
//!
//! The pipeline is: drop fully disconnected unknowns, scale symmetrically so
//! every diagonal entry has magnitude one, then reduce bandwidth with reverse
//! Cuthill-McKee on the symmetrized pattern. [`Reordering`] keeps everything
//! needed to map a right-hand side in and a solution back out.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{BandMetrics, CsrMatrix, DenseBlock};

/// A bijection on `0..n`. `forward[old] = new`, `inverse[new] = old`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Self {
            forward: (0..n).collect(),
            inverse: (0..n).collect(),
        }
    }

    /// Builds from an ordering: `order[new] = old`.
    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut forward = vec![usize::MAX; n];
        for (new, &old) in order.iter().enumerate() {
            if old >= n || forward[old] != usize::MAX {
                return Err(Error::InvalidParameter(format!(
                    "ordering is not a permutation (index {old})"
                )));
            }
            forward[old] = new;
        }
        Ok(Self {
            forward,
            inverse: order,
        })
    }

    pub fn reversal(n: usize) -> Self {
        Self::from_order((0..n).rev().collect()).expect("reversal is a bijection")
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    /// New position of old index `old`.
    pub fn apply(&self, old: usize) -> usize {
        self.forward[old]
    }

    /// Old index now at position `new`.
    pub fn source(&self, new: usize) -> usize {
        self.inverse[new]
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn inverted(&self) -> Self {
        Self {
            forward: self.inverse.clone(),
            inverse: self.forward.clone(),
        }
    }

    /// Moves row `old` of `x` to row `apply(old)`.
    pub fn permute_rows(&self, x: &DenseBlock) -> DenseBlock {
        DenseBlock::from_fn(x.nrows(), x.ncols(), |new, c| x[(self.inverse[new], c)])
    }

    /// Undoes [`permute_rows`](Self::permute_rows).
    pub fn unpermute_rows(&self, x: &DenseBlock) -> DenseBlock {
        DenseBlock::from_fn(x.nrows(), x.ncols(), |old, c| x[(self.forward[old], c)])
    }
}

/// Removes unknowns whose row and column carry nothing but (at most) the
/// diagonal. Returns the reduced matrix and the removed original indices.
pub fn strip_disconnected(a: &CsrMatrix) -> Result<(CsrMatrix, Vec<usize>)> {
    if !a.is_square() {
        return Err(Error::NotSquare {
            n_rows: a.n_rows(),
            n_cols: a.n_cols(),
        });
    }
    let n = a.n_rows();
    let mut connected = vec![false; n];
    for (i, j, _) in a.triplets() {
        if i != j {
            connected[i] = true;
            connected[j] = true;
        }
    }
    let kept: Vec<usize> = (0..n).filter(|&i| connected[i]).collect();
    let removed: Vec<usize> = (0..n).filter(|&i| !connected[i]).collect();
    if removed.is_empty() {
        return Ok((a.clone(), removed));
    }
    let mut new_index = vec![usize::MAX; n];
    for (new, &old) in kept.iter().enumerate() {
        new_index[old] = new;
    }
    let trip: Vec<_> = a
        .triplets()
        .filter(|&(i, j, _)| connected[i] && connected[j])
        .map(|(i, j, v)| (new_index[i], new_index[j], v))
        .collect();
    Ok((
        CsrMatrix::from_triplets(kept.len(), kept.len(), &trip)?,
        removed,
    ))
}

/// Symmetric scaling `D A D` with `D = diag(|a_ii|^-1/2)`.
/// Returns the scaled matrix and the row and column scale vectors (equal).
pub fn diagonal_scale(a: &CsrMatrix) -> Result<(CsrMatrix, Vec<f64>, Vec<f64>)> {
    if !a.is_square() {
        return Err(Error::NotSquare {
            n_rows: a.n_rows(),
            n_cols: a.n_cols(),
        });
    }
    let mut scale = vec![0.0; a.n_rows()];
    for (i, s) in scale.iter_mut().enumerate() {
        let d = a.get(i, i).abs();
        if d == 0.0 {
            return Err(Error::SingularScaling { row: i });
        }
        *s = 1.0 / d.sqrt();
    }
    let values = a
        .triplets()
        .map(|(i, j, v)| {
            if i == j {
                v.signum()
            } else {
                scale[i] * v * scale[j]
            }
        })
        .collect();
    let scaled = CsrMatrix::from_parts(
        a.n_rows(),
        a.n_cols(),
        a.row_ptr().to_vec(),
        a.col_idx().to_vec(),
        values,
    )?;
    Ok((scaled, scale.clone(), scale))
}

/// Adjacency lists of the symmetrized off-diagonal pattern, sorted ascending.
fn symmetric_adjacency(a: &CsrMatrix) -> Vec<Vec<usize>> {
    let n = a.n_rows();
    let mut adj = vec![Vec::new(); n];
    for (i, j, _) in a.triplets() {
        if i != j {
            adj[i].push(j);
            adj[j].push(i);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    adj
}

/// Breadth-first level structure from `root`: the visit order and the depth
/// of the last level.
fn level_structure(
    adj: &[Vec<usize>],
    root: usize,
    mark: &mut [usize],
    stamp: usize,
) -> (Vec<usize>, usize) {
    let mut order = vec![root];
    let mut level = vec![0usize];
    mark[root] = stamp;
    let mut head = 0;
    while head < order.len() {
        let v = order[head];
        let lv = level[head];
        head += 1;
        for &w in &adj[v] {
            if mark[w] != stamp {
                mark[w] = stamp;
                order.push(w);
                level.push(lv + 1);
            }
        }
    }
    let depth = *level.last().unwrap();
    let last: Vec<usize> = order
        .iter()
        .zip(&level)
        .filter(|&(_, &l)| l == depth)
        .map(|(&v, _)| v)
        .collect();
    (last, depth)
}

/// George-Liu pseudo-peripheral node search starting at `start`.
fn pseudo_peripheral(
    adj: &[Vec<usize>],
    start: usize,
    mark: &mut [usize],
    stamp: &mut usize,
) -> usize {
    let mut root = start;
    *stamp += 1;
    let (mut last, mut depth) = level_structure(adj, root, mark, *stamp);
    loop {
        let candidate = *last
            .iter()
            .min_by_key(|&&v| (adj[v].len(), v))
            .expect("level structure is non-empty");
        *stamp += 1;
        let (next_last, next_depth) = level_structure(adj, candidate, mark, *stamp);
        if next_depth > depth {
            root = candidate;
            last = next_last;
            depth = next_depth;
        } else {
            return root;
        }
    }
}

/// Reverse Cuthill-McKee ordering of the pattern of `A + A^T`.
///
/// Components are started from a pseudo-peripheral node found from their
/// minimum-degree vertex; neighbours are visited by ascending degree, then
/// ascending index.
pub fn rcm_ordering(a: &CsrMatrix) -> Result<Permutation> {
    if !a.is_square() {
        return Err(Error::NotSquare {
            n_rows: a.n_rows(),
            n_cols: a.n_cols(),
        });
    }
    let n = a.n_rows();
    let adj = symmetric_adjacency(a);
    let mut visited = vec![false; n];
    let mut mark = vec![0usize; n];
    let mut stamp = 0usize;
    let mut order = Vec::with_capacity(n);

    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by_key(|&v| (adj[v].len(), v));

    for &seed in &by_degree {
        if visited[seed] {
            continue;
        }
        let root = pseudo_peripheral(&adj, seed, &mut mark, &mut stamp);
        let mut queue = VecDeque::from([root]);
        visited[root] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| (adj[w].len(), w));
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    Permutation::from_order(order)
}

/// `B[rowp(i), colp(j)] = A[i, j]`.
pub fn apply_permutation(
    a: &CsrMatrix,
    rowp: &Permutation,
    colp: &Permutation,
) -> Result<CsrMatrix> {
    if rowp.len() != a.n_rows() {
        return Err(Error::DimensionMismatch {
            context: "row permutation",
            expected: a.n_rows(),
            got: rowp.len(),
        });
    }
    if colp.len() != a.n_cols() {
        return Err(Error::DimensionMismatch {
            context: "column permutation",
            expected: a.n_cols(),
            got: colp.len(),
        });
    }
    let trip: Vec<_> = a
        .triplets()
        .map(|(i, j, v)| (rowp.apply(i), colp.apply(j), v))
        .collect();
    CsrMatrix::from_triplets(a.n_rows(), a.n_cols(), &trip)
}

/// Before/after summary emitted by the `reorder` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReorderReport {
    pub n_original: usize,
    pub n_reordered: usize,
    pub removed: usize,
    pub before: BandMetrics,
    pub after: BandMetrics,
}

/// A matrix taken through strip, scale and RCM, with the maps needed to
/// move vectors between the original and the reordered numbering.
#[derive(Debug, Clone)]
pub struct Reordering {
    pub matrix: CsrMatrix,
    n_original: usize,
    /// Original index of each retained unknown, in stripped numbering.
    kept: Vec<usize>,
    /// Removed unknowns and their original diagonal entry.
    removed: Vec<(usize, f64)>,
    scale: Vec<f64>,
    perm: Permutation,
}

impl Reordering {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        let (stripped, removed_idx) = strip_disconnected(a)?;
        let removed: Vec<(usize, f64)> = removed_idx.iter().map(|&i| (i, a.get(i, i))).collect();
        let mut is_removed = vec![false; a.n_rows()];
        for &i in &removed_idx {
            is_removed[i] = true;
        }
        let kept: Vec<usize> = (0..a.n_rows()).filter(|&i| !is_removed[i]).collect();
        let (scaled, scale, _) = diagonal_scale(&stripped).map_err(|e| match e {
            Error::SingularScaling { row } => Error::SingularScaling { row: kept[row] },
            other => other,
        })?;
        let perm = rcm_ordering(&scaled)?;
        let matrix = apply_permutation(&scaled, &perm, &perm)?;
        Ok(Self {
            matrix,
            n_original: a.n_rows(),
            kept,
            removed,
            scale,
            perm,
        })
    }

    pub fn removed(&self) -> Vec<usize> {
        self.removed.iter().map(|r| r.0).collect()
    }

    pub fn permutation(&self) -> &Permutation {
        &self.perm
    }

    /// Original right-hand side to the reordered system: `P D f_kept`.
    pub fn map_rhs(&self, f: &DenseBlock) -> DenseBlock {
        let kept = DenseBlock::from_fn(self.kept.len(), f.ncols(), |i, c| {
            self.scale[i] * f[(self.kept[i], c)]
        });
        self.perm.permute_rows(&kept)
    }

    /// Reordered solution back to the original numbering. Removed unknowns
    /// are recovered from their own diagonal equation (zero when the row was
    /// empty).
    pub fn unmap_solution(&self, z: &DenseBlock, f: &DenseBlock) -> DenseBlock {
        let y = self.perm.unpermute_rows(z);
        let mut x = DenseBlock::zeros(self.n_original, z.ncols());
        for (i, &orig) in self.kept.iter().enumerate() {
            for c in 0..z.ncols() {
                x[(orig, c)] = self.scale[i] * y[(i, c)];
            }
        }
        for &(orig, d) in &self.removed {
            for c in 0..z.ncols() {
                x[(orig, c)] = if d != 0.0 { f[(orig, c)] / d } else { 0.0 };
            }
        }
        x
    }

    pub fn report(&self, original: &CsrMatrix) -> Result<ReorderReport> {
        Ok(ReorderReport {
            n_original: self.n_original,
            n_reordered: self.matrix.n_rows(),
            removed: self.removed.len(),
            before: original.band_metrics()?,
            after: self.matrix.band_metrics()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tridiagonal(n: usize) -> CsrMatrix {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 4.0));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
                t.push((i + 1, i, -1.0));
            }
        }
        CsrMatrix::from_triplets(n, n, &t).unwrap()
    }

    #[test]
    fn strip_diagonal_matrix_removes_everything() {
        let a = CsrMatrix::from_triplets(3, 3, &[(0, 0, 1.0), (1, 1, 2.0), (2, 2, 3.0)]).unwrap();
        let (b, removed) = strip_disconnected(&a).unwrap();
        assert_eq!(b.n_rows(), 0);
        assert_eq!(removed, vec![0, 1, 2]);
    }

    #[test]
    fn strip_leaves_connected_matrix_alone() {
        let a = tridiagonal(6);
        let (b, removed) = strip_disconnected(&a).unwrap();
        assert_eq!(b, a);
        assert!(removed.is_empty());
    }

    #[test]
    fn strip_removes_isolated_and_empty_rows() {
        let a =
            CsrMatrix::from_triplets(4, 4, &[(0, 0, 1.0), (0, 2, 1.0), (1, 1, 5.0), (2, 2, 1.0)])
                .unwrap();
        let (b, removed) = strip_disconnected(&a).unwrap();
        assert_eq!(removed, vec![1, 3]);
        assert_eq!(b.to_dense(), nalgebra::dmatrix![1.0, 1.0; 0.0, 1.0]);
    }

    #[test]
    fn scale_diag_4_9() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 4.0), (1, 1, 9.0)]).unwrap();
        let (b, r, c) = diagonal_scale(&a).unwrap();
        assert_eq!(b, CsrMatrix::identity(2));
        assert_eq!(r, vec![0.5, 1.0 / 3.0]);
        assert_eq!(c, r);
    }

    #[test]
    fn scale_unit_diagonal_is_noop() {
        let mut a = tridiagonal(5);
        a = diagonal_scale(&a).unwrap().0;
        let (b, r, _) = diagonal_scale(&a).unwrap();
        assert_eq!(b, a);
        assert!(r.iter().all(|&s| s == 1.0));
    }

    #[test]
    fn scale_random_spd_has_unit_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = DenseBlock::from_fn(10, 10, |_, _| rng.random::<f64>() - 0.5);
        let spd = &m * m.transpose() + DenseBlock::identity(10, 10) * 0.1;
        let (b, _, _) = diagonal_scale(&CsrMatrix::from_dense(&spd)).unwrap();
        for i in 0..10 {
            assert!((b.get(i, i).abs() - 1.0).abs() <= 1e-14);
        }
        let (c, _, _) = diagonal_scale(&b).unwrap();
        assert!((c.to_dense() - b.to_dense()).amax() <= 1e-14);
    }

    #[test]
    fn scale_zero_diagonal_names_row() {
        let a = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        assert!(matches!(
            diagonal_scale(&a),
            Err(Error::SingularScaling { row: 1 })
        ));
    }

    #[test]
    fn rcm_does_not_widen_tridiagonal() {
        let a = tridiagonal(12);
        let p = rcm_ordering(&a).unwrap();
        let b = apply_permutation(&a, &p, &p).unwrap();
        assert!(b.band_metrics().unwrap().band.k <= 1);
    }

    /// Level-by-level oracle: for an `m x m` grid every BFS level from a
    /// corner is an anti-diagonal of at most `m` nodes, and RCM numbers
    /// consecutive levels contiguously, so neighbours are at most `m` apart.
    #[test]
    fn rcm_laplacian_8x8_bandwidth() {
        let a = synth::laplacian_2d(8, 8);
        assert_eq!(a.band_metrics().unwrap().band.k, 8);
        let shuffled = {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut order: Vec<usize> = (0..64).collect();
            for i in (1..64).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let p = Permutation::from_order(order).unwrap();
            apply_permutation(&a, &p, &p).unwrap()
        };
        assert!(shuffled.band_metrics().unwrap().band.k > 8);
        let p = rcm_ordering(&shuffled).unwrap();
        let b = apply_permutation(&shuffled, &p, &p).unwrap();
        assert!(b.band_metrics().unwrap().band.k <= 8);
    }

    #[test]
    fn permutation_identity_and_reversal() {
        let a = tridiagonal(7);
        let id = Permutation::identity(7);
        assert_eq!(apply_permutation(&a, &id, &id).unwrap(), a);
        let r = Permutation::reversal(7);
        let once = apply_permutation(&a, &r, &Permutation::identity(7)).unwrap();
        assert_eq!(
            apply_permutation(&once, &r, &Permutation::identity(7)).unwrap(),
            a
        );
    }

    #[test]
    fn permutation_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = DenseBlock::from_fn(6, 6, |_, _| {
            if rng.random::<f64>() < 0.4 {
                rng.random()
            } else {
                0.0
            }
        });
        let a = CsrMatrix::from_dense(&d);
        let rp = Permutation::from_order(vec![3, 0, 5, 1, 4, 2]).unwrap();
        let cp = Permutation::from_order(vec![1, 2, 0, 5, 3, 4]).unwrap();
        let b = apply_permutation(&a, &rp, &cp).unwrap().to_dense();
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(b[(rp.apply(i), cp.apply(j))], d[(i, j)]);
            }
        }
    }

    #[test]
    fn permutation_size_mismatch() {
        let a = tridiagonal(4);
        let p = Permutation::identity(3);
        assert!(apply_permutation(&a, &p, &Permutation::identity(4)).is_err());
    }

    #[test]
    fn reordered_solve_maps_back() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for &n in &[20usize, 75, 200] {
            let mut a = synth::random_sparse_nonsingular(n, 4.0 / n as f64, &mut rng);
            // one isolated unknown exercises the strip path
            let mut t: Vec<_> = a.triplets().filter(|&(i, j, _)| i != 3 && j != 3).collect();
            t.push((3, 3, 2.5));
            a = CsrMatrix::from_triplets(n, n, &t).unwrap();
            let f = DenseBlock::from_fn(n, 2, |_, _| rng.random::<f64>() - 0.5);
            let x_ref = a.to_dense().lu().solve(&f).unwrap();

            let r = Reordering::new(&a).unwrap();
            assert_eq!(r.removed(), vec![3]);
            let z = r.matrix.to_dense().lu().solve(&r.map_rhs(&f)).unwrap();
            let x = r.unmap_solution(&z, &f);
            assert!((x - &x_ref).norm() / x_ref.norm() <= 1e-10);
        }
    }

    #[test]
    fn pipeline_band_below_n_for_connected_matrix() {
        let a = synth::laplacian_2d(6, 9);
        let r = Reordering::new(&a).unwrap();
        assert!(r.matrix.band_metrics().unwrap().band.k < r.matrix.n_rows());
    }

    proptest! {
        #[test]
        fn rcm_is_a_bijection(n in 1usize..40, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = synth::random_sparse_nonsingular(n, 0.1, &mut rng);
            let p = rcm_ordering(&a).unwrap();
            let mut seen = vec![false; n];
            for old in 0..n {
                let new = p.apply(old);
                prop_assert!(!seen[new]);
                seen[new] = true;
                prop_assert_eq!(p.source(new), old);
            }
        }

        #[test]
        fn identity_permutation_preserves_metrics(n in 2usize..30, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = synth::random_sparse_nonsingular(n, 0.2, &mut rng);
            let id = Permutation::identity(n);
            let b = apply_permutation(&a, &id, &id).unwrap();
            prop_assert_eq!(b.band_metrics().unwrap(), a.band_metrics().unwrap());
        }
    }
}
