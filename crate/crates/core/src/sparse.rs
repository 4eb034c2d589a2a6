//! Symmetric sparse matrices stored as the upper triangle in CSR form.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use nalgebra::DMatrix;
use num_complex::Complex64;

/// Scalar field shared by the real and complex-symmetric kernels.
pub trait Scalar:
    Copy
    + Send
    + Sync
    + PartialEq
    + std::fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + Mul<f64, Output = Self>
    + 'static
{
    fn zero() -> Self;
    fn from_real(x: f64) -> Self;
    fn modulus(self) -> f64;
}

impl Scalar for f64 {
    fn zero() -> Self {
        0.0
    }
    fn from_real(x: f64) -> Self {
        x
    }
    fn modulus(self) -> f64 {
        self.abs()
    }
}

impl Scalar for Complex64 {
    fn zero() -> Self {
        Complex64::new(0.0, 0.0)
    }
    fn from_real(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }
    fn modulus(self) -> f64 {
        self.norm()
    }
}

/// Real symmetric sparse matrix. Only entries with `col >= row` are stored,
/// sorted by row then column, with no explicit zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSym {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl SparseSym {
    /// Builds from `(row, col, value)` contributions in either triangle.
    /// Duplicates are summed in input order; exact zeros are dropped.
    pub fn from_triplets(n: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        for e in &mut entries {
            assert!(e.0 < n && e.1 < n, "triplet index out of range");
            if e.1 < e.0 {
                *e = (e.1, e.0, e.2);
            }
        }
        entries.sort_by_key(|&(i, j, _)| (i, j));

        let mut row_ptr = vec![0usize; n + 1];
        let mut col_idx = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        let mut k = 0;
        while k < entries.len() {
            let (i, j, mut v) = entries[k];
            k += 1;
            while k < entries.len() && entries[k].0 == i && entries[k].1 == j {
                v += entries[k].2;
                k += 1;
            }
            if v != 0.0 {
                col_idx.push(j);
                values.push(v);
                row_ptr[i + 1] += 1;
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        SparseSym {
            n,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Stored (upper-triangle) entry count.
    pub fn nnz_upper(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if j < i { (j, i) } else { (i, j) };
        let cols = &self.col_idx[self.row_ptr[i]..self.row_ptr[i + 1]];
        match cols.binary_search(&j) {
            Ok(k) => self.values[self.row_ptr[i] + k],
            Err(_) => 0.0,
        }
    }

    /// Upper-triangle entries `(row, col, value)` in storage order.
    pub fn iter_upper(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |i| {
            (self.row_ptr[i]..self.row_ptr[i + 1]).map(move |k| (i, self.col_idx[k], self.values[k]))
        })
    }

    /// y = A x.
    pub fn mul_vec<T: Scalar>(&self, x: &[T], y: &mut [T]) {
        assert_eq!(x.len(), self.n);
        assert_eq!(y.len(), self.n);
        y.iter_mut().for_each(|v| *v = T::zero());
        for i in 0..self.n {
            let xi = x[i];
            let mut acc = T::zero();
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                let j = self.col_idx[k];
                let a = self.values[k];
                acc += x[j] * a;
                if j != i {
                    y[j] += xi * a;
                }
            }
            y[i] += acc;
        }
    }

    pub fn apply<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut y = vec![T::zero(); self.n];
        self.mul_vec(x, &mut y);
        y
    }

    /// A X for a dense block of columns.
    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.n);
        let mut out = DMatrix::zeros(self.n, x.ncols());
        for c in 0..x.ncols() {
            let col: Vec<f64> = x.column(c).iter().copied().collect();
            let y = self.apply(&col);
            out.column_mut(c).copy_from_slice(&y);
        }
        out
    }

    /// xᵀ A y.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let ay = self.apply(y);
        x.iter().zip(&ay).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Infinity norm of the full symmetric matrix.
    pub fn norm_inf(&self) -> f64 {
        let mut rows = vec![0.0; self.n];
        for (i, j, v) in self.iter_upper() {
            rows[i] += v.abs();
            if i != j {
                rows[j] += v.abs();
            }
        }
        rows.into_iter().fold(0.0, f64::max)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n, self.n);
        for (i, j, v) in self.iter_upper() {
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
        d
    }

    /// Upper-triangle coordinate text, 1-based, one `row col value` per line.
    pub fn to_coordinate_text(&self) -> String {
        let mut s = String::new();
        for (i, j, v) in self.iter_upper() {
            writeln!(s, "{} {} {:.16e}", i + 1, j + 1, v).unwrap();
        }
        s
    }

    /// Symmetric adjacency lists (excluding the diagonal).
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for (i, j, _) in self.iter_upper() {
            if i != j {
                adj[i].push(j);
                adj[j].push(i);
            }
        }
        for row in &mut adj {
            row.sort_unstable();
        }
        adj
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triplets_are_mirrored_and_summed() {
        let a = SparseSym::from_triplets(
            3,
            vec![(1, 0, 1.0), (0, 1, 2.0), (2, 2, 4.0), (0, 0, 1.0), (2, 1, 0.0)],
        );
        assert_eq!(a.nnz_upper(), 3);
        assert_eq!(a.get(0, 1), 3.0);
        assert_eq!(a.get(1, 0), 3.0);
        assert_eq!(a.get(1, 2), 0.0);
        let y = a.apply(&[1.0, 1.0, 1.0]);
        assert_eq!(y, vec![4.0, 3.0, 4.0]);
        assert_eq!(a.norm_inf(), 4.0);
    }

    #[test]
    fn complex_matvec_matches_dense() {
        let a = SparseSym::from_triplets(2, vec![(0, 0, 2.0), (0, 1, -1.0), (1, 1, 3.0)]);
        let x = [Complex64::new(1.0, 2.0), Complex64::new(-1.0, 0.5)];
        let y = a.apply(&x);
        assert_eq!(y[0], x[0] * 2.0 - x[1]);
        assert_eq!(y[1], -x[0] + x[1] * 3.0);
    }

    #[test]
    fn coordinate_text_is_one_based() {
        let a = SparseSym::from_triplets(2, vec![(1, 1, 0.5)]);
        assert_eq!(a.to_coordinate_text(), "2 2 5.0000000000000000e-1\n");
    }
}
