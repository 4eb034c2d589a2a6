//! Envelope (skyline) LDLᵀ factorization for sparse symmetric systems.
//!
//! Rows are renumbered by reverse Cuthill-McKee so the envelope stays close
//! to the matrix bandwidth. The same factorization serves real symmetric
//! matrices (where the pivot signs give the inertia) and complex symmetric
//! ones (`A = Aᵀ`, no conjugation), which is what the Bloch-Torrey time
//! stepper needs.

use std::collections::VecDeque;
use std::sync::Arc;

use thiserror::Error;

use crate::sparse::{Scalar, SparseSym};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FactorError {
    #[error("pivot {pivot:e} at row {row} is too small relative to the diagonal scale {scale:e}")]
    SmallPivot { row: usize, pivot: f64, scale: f64 },
    #[error("non-finite value produced at row {0}")]
    NonFinite(usize),
}

/// Relative pivot size below which a factorization is declared singular.
pub const PIVOT_TOLERANCE: f64 = 1e-13;

/// Fill-reducing ordering and envelope layout shared by every matrix with
/// the same sparsity pattern.
#[derive(Debug, Clone)]
pub struct Profile {
    n: usize,
    /// `perm[new] = old`.
    perm: Vec<usize>,
    /// `inv[old] = new`.
    inv: Vec<usize>,
    /// First stored column of each (renumbered) row.
    first: Vec<usize>,
    /// Storage offset of each row; row `i` occupies `first[i]..=i`.
    offset: Vec<usize>,
}

impl Profile {
    /// Builds an RCM-ordered envelope for the given symmetric adjacency.
    pub fn from_adjacency(adj: &[Vec<usize>]) -> Profile {
        let n = adj.len();
        let perm = reverse_cuthill_mckee(adj);
        let mut inv = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let mut first: Vec<usize> = (0..n).collect();
        for (old, nbrs) in adj.iter().enumerate() {
            let i = inv[old];
            for &o in nbrs {
                let j = inv[o];
                if j < i {
                    first[i] = first[i].min(j);
                }
            }
        }
        let mut offset = Vec::with_capacity(n + 1);
        let mut acc = 0;
        for i in 0..n {
            offset.push(acc);
            acc += i - first[i] + 1;
        }
        offset.push(acc);
        Profile {
            n,
            perm,
            inv,
            first,
            offset,
        }
    }

    /// Profile covering the pattern of `a`.
    pub fn for_matrix(a: &SparseSym) -> Profile {
        Profile::from_adjacency(&a.adjacency())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored envelope entries (including the diagonal).
    pub fn storage_len(&self) -> usize {
        self.offset[self.n]
    }

    pub fn bandwidth(&self) -> usize {
        (0..self.n).map(|i| i - self.first[i]).max().unwrap_or(0)
    }

    fn slot(&self, old_i: usize, old_j: usize) -> Option<usize> {
        let (mut i, mut j) = (self.inv[old_i], self.inv[old_j]);
        if j > i {
            std::mem::swap(&mut i, &mut j);
        }
        (j >= self.first[i]).then(|| self.offset[i] + j - self.first[i])
    }
}

/// Matrix values laid out in a [`Profile`] envelope, ready to factor.
#[derive(Debug, Clone)]
pub struct SkylineMatrix<T> {
    profile: Arc<Profile>,
    data: Vec<T>,
}

impl<T: Scalar> SkylineMatrix<T> {
    pub fn zeros(profile: Arc<Profile>) -> Self {
        let data = vec![T::zero(); profile.storage_len()];
        SkylineMatrix { profile, data }
    }

    /// Adds `coef · a`. Panics if `a` has an entry outside the envelope.
    pub fn add_sparse(&mut self, a: &SparseSym, coef: T) {
        assert_eq!(a.dim(), self.profile.n);
        for (i, j, v) in a.iter_upper() {
            let k = self
                .profile
                .slot(i, j)
                .expect("matrix entry outside the factorization envelope");
            self.data[k] += coef * v;
        }
    }

    /// In-place LDLᵀ without pivoting.
    pub fn factor(mut self) -> Result<LdlFactor<T>, FactorError> {
        let p = &*self.profile;
        let scale = (0..p.n)
            .map(|i| self.data[p.offset[i + 1] - 1].modulus())
            .fold(0.0, f64::max);
        for i in 0..p.n {
            let fi = p.first[i];
            let (head, row_i) = self.data.split_at_mut(p.offset[i]);
            let row_i = &mut row_i[..i - fi + 1];
            // Row i becomes g_ij = a_ij − Σ_k L_jk g_ik for j < i.
            for j in fi..i {
                let fj = p.first[j];
                let k0 = fi.max(fj);
                if k0 < j {
                    let row_j = &head[p.offset[j]..p.offset[j + 1]];
                    let lj = &row_j[k0 - fj..j - fj];
                    let gi = &row_i[k0 - fi..j - fi];
                    let mut s = T::zero();
                    for (a, b) in lj.iter().zip(gi) {
                        s += *a * *b;
                    }
                    row_i[j - fi] -= s;
                }
            }
            let mut d = row_i[i - fi];
            for j in fi..i {
                let dj = head[p.offset[j + 1] - 1];
                let g = row_i[j - fi];
                let l = g / dj;
                d -= l * g;
                row_i[j - fi] = l;
            }
            let m = d.modulus();
            if !m.is_finite() {
                return Err(FactorError::NonFinite(i));
            }
            if m <= PIVOT_TOLERANCE * scale {
                return Err(FactorError::SmallPivot {
                    row: i,
                    pivot: m,
                    scale,
                });
            }
            row_i[i - fi] = d;
        }
        Ok(LdlFactor {
            profile: self.profile,
            data: self.data,
        })
    }
}

/// Factors `Σ coef_k · A_k` over a shared profile.
pub fn factor_combination<T: Scalar>(
    profile: &Arc<Profile>,
    terms: &[(&SparseSym, T)],
) -> Result<LdlFactor<T>, FactorError> {
    let mut m = SkylineMatrix::zeros(profile.clone());
    for (a, c) in terms {
        m.add_sparse(a, *c);
    }
    m.factor()
}

#[derive(Debug, Clone)]
pub struct LdlFactor<T> {
    profile: Arc<Profile>,
    data: Vec<T>,
}

impl<T: Scalar> LdlFactor<T> {
    pub fn dim(&self) -> usize {
        self.profile.n
    }

    fn pivot(&self, i: usize) -> T {
        self.data[self.profile.offset[i + 1] - 1]
    }

    /// Solves `A x = b` with `b` and `x` in the original numbering.
    pub fn solve(&self, b: &[T]) -> Vec<T> {
        let p = &*self.profile;
        assert_eq!(b.len(), p.n);
        let mut y: Vec<T> = p.perm.iter().map(|&o| b[o]).collect();
        for i in 0..p.n {
            let fi = p.first[i];
            let row = &self.data[p.offset[i]..p.offset[i + 1] - 1];
            let mut s = T::zero();
            for (l, v) in row.iter().zip(&y[fi..i]) {
                s += *l * *v;
            }
            y[i] -= s;
        }
        for (i, v) in y.iter_mut().enumerate() {
            *v = *v / self.pivot(i);
        }
        for i in (0..p.n).rev() {
            let fi = p.first[i];
            let xi = y[i];
            let row = &self.data[p.offset[i]..p.offset[i + 1] - 1];
            for (k, l) in row.iter().enumerate() {
                y[fi + k] -= *l * xi;
            }
        }
        let mut x = vec![T::zero(); p.n];
        for (new, &old) in p.perm.iter().enumerate() {
            x[old] = y[new];
        }
        x
    }
}

impl LdlFactor<f64> {
    /// Number of negative pivots, equal to the number of negative
    /// eigenvalues of the factored matrix (Sylvester's law of inertia).
    pub fn negative_pivots(&self) -> usize {
        (0..self.profile.n).filter(|&i| self.pivot(i) < 0.0).count()
    }
}

/// Reverse Cuthill-McKee ordering, component by component, each started
/// from a pseudo-peripheral node. Returns `perm[new] = old`.
pub fn reverse_cuthill_mckee(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let degree = |v: usize| adj[v].len();
    for seed in 0..n {
        if visited[seed] {
            continue;
        }
        let start = pseudo_peripheral(adj, seed);
        let mut queue = VecDeque::new();
        queue.push_back(start);
        visited[start] = true;
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut nbrs: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            nbrs.sort_by_key(|&w| (degree(w), w));
            for w in nbrs {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

fn bfs_levels(adj: &[Vec<usize>], start: usize) -> (Vec<usize>, usize) {
    let mut level = vec![usize::MAX; adj.len()];
    let mut queue = VecDeque::new();
    level[start] = 0;
    queue.push_back(start);
    let mut last = Vec::new();
    let mut depth = 0;
    while let Some(v) = queue.pop_front() {
        if level[v] > depth {
            depth = level[v];
            last.clear();
        }
        last.push(v);
        for &w in &adj[v] {
            if level[w] == usize::MAX {
                level[w] = level[v] + 1;
                queue.push_back(w);
            }
        }
    }
    (last, depth)
}

fn pseudo_peripheral(adj: &[Vec<usize>], seed: usize) -> usize {
    let mut v = seed;
    let (mut last, mut depth) = bfs_levels(adj, v);
    loop {
        let cand = *last
            .iter()
            .min_by_key(|&&w| (adj[w].len(), w))
            .expect("non-empty level");
        let (l2, d2) = bfs_levels(adj, cand);
        if d2 <= depth {
            return v;
        }
        v = cand;
        last = l2;
        depth = d2;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn laplacian_1d(n: usize, shift: f64) -> SparseSym {
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 2.0 - shift));
            if i + 1 < n {
                t.push((i, i + 1, -1.0));
            }
        }
        SparseSym::from_triplets(n, t)
    }

    #[test]
    fn solves_real_system() {
        let a = laplacian_1d(20, 0.0);
        let prof = Arc::new(Profile::for_matrix(&a));
        let f = factor_combination(&prof, &[(&a, 1.0)]).unwrap();
        let x: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect();
        let b = a.apply(&x);
        let y = f.solve(&b);
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).abs() < 1e-12);
        }
        assert_eq!(f.negative_pivots(), 0);
    }

    #[test]
    fn inertia_counts_eigenvalues_below_shift() {
        // Eigenvalues of the Dirichlet 1D Laplacian: 2 − 2cos(kπ/(n+1)).
        let n = 30;
        let shift = 1.3;
        let expect = (1..=n)
            .filter(|&k| 2.0 - 2.0 * (k as f64 * std::f64::consts::PI / (n + 1) as f64).cos() < shift)
            .count();
        let a = laplacian_1d(n, shift);
        let prof = Arc::new(Profile::for_matrix(&a));
        let f = factor_combination(&prof, &[(&a, 1.0)]).unwrap();
        assert_eq!(f.negative_pivots(), expect);
    }

    #[test]
    fn solves_complex_symmetric_system() {
        let a = laplacian_1d(15, 0.0);
        let d = SparseSym::from_triplets(15, (0..15).map(|i| (i, i, i as f64)).collect());
        let prof = Arc::new(Profile::for_matrix(&a));
        let c = Complex64::new(0.0, 0.3);
        let f = factor_combination(&prof, &[(&a, Complex64::new(1.0, 0.0)), (&d, c)]).unwrap();
        let x: Vec<Complex64> = (0..15).map(|i| Complex64::new(i as f64, 1.0)).collect();
        let ax = a.apply(&x);
        let dx = d.apply(&x);
        let b: Vec<Complex64> = ax.iter().zip(&dx).map(|(u, v)| u + c * v).collect();
        let y = f.solve(&b);
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).norm() < 1e-11);
        }
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = laplacian_1d(5, 2.0 - 2.0 * (std::f64::consts::PI / 6.0).cos());
        let prof = Arc::new(Profile::for_matrix(&a));
        assert!(factor_combination(&prof, &[(&a, 1.0)]).is_err());
    }

    #[test]
    fn rcm_is_a_permutation() {
        let adj = vec![vec![3], vec![2], vec![1, 3], vec![0, 2], vec![]];
        let mut p = reverse_cuthill_mckee(&adj);
        p.sort_unstable();
        assert_eq!(p, vec![0, 1, 2, 3, 4]);
    }
}
