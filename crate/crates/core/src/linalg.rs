//! Dense kernels: complex eigendecomposition and matrix exponentials.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;

/// `K = V diag(values) V⁻¹` with unit 2-norm columns in `V`.
#[derive(Debug, Clone)]
pub struct ComplexEigen {
    pub values: Vec<Complex64>,
    pub vectors: CMatrix,
    pub inverse: CMatrix,
    /// ‖V‖₁‖V⁻¹‖₁.
    pub condition: f64,
    /// ‖KV − VΣ‖_F / ‖K‖_F.
    pub residual: f64,
}

/// Eigendecomposition of a general complex matrix through its Schur form.
/// Returns `None` if the QR iteration does not converge or `V` is singular.
pub fn eigen_decompose(k: &CMatrix) -> Option<ComplexEigen> {
    let n = k.nrows();
    assert_eq!(n, k.ncols());
    if n == 0 {
        return None;
    }
    let schur = nalgebra::linalg::Schur::try_new(k.clone(), f64::EPSILON, 10_000)?;
    let (q, t) = schur.unpack();
    let values: Vec<Complex64> = (0..n).map(|i| t[(i, i)]).collect();

    let tnorm = t.iter().map(|z| z.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let small = tnorm * f64::EPSILON;
    let mut y = CMatrix::zeros(n, n);
    for c in 0..n {
        let lam = t[(c, c)];
        y[(c, c)] = Complex64::new(1.0, 0.0);
        for i in (0..c).rev() {
            let mut s = Complex64::new(0.0, 0.0);
            for j in i + 1..=c {
                s += t[(i, j)] * y[(j, c)];
            }
            let mut d = t[(i, i)] - lam;
            if d.norm() < small {
                d = Complex64::new(small, 0.0);
            }
            y[(i, c)] = -s / d;
        }
    }
    let mut v = &q * &y;
    for mut col in v.column_iter_mut() {
        let nrm = col.norm();
        col /= Complex64::new(nrm, 0.0);
    }
    let inverse = v.clone().lu().try_inverse()?;
    let condition = norm1(&v) * norm1(&inverse);

    let kv = k * &v;
    let mut vs = v.clone();
    for (c, mut col) in vs.column_iter_mut().enumerate() {
        col *= values[c];
    }
    let residual = (kv - vs).norm() / k.norm().max(f64::MIN_POSITIVE);
    Some(ComplexEigen {
        values,
        vectors: v,
        inverse,
        condition,
        residual,
    })
}

/// Maximum absolute column sum.
pub fn norm1(a: &CMatrix) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// e^{A} by scaling and squaring with a Padé approximant.
pub fn expm(a: &CMatrix) -> CMatrix {
    a.clone().exp()
}

/// Converts a real matrix to complex.
pub fn to_complex(a: &DMatrix<f64>) -> CMatrix {
    a.map(|x| Complex64::new(x, 0.0))
}

/// Row `r` of a matrix as a vector.
pub fn row_vector(a: &CMatrix, r: usize) -> DVector<Complex64> {
    DVector::from_iterator(a.ncols(), a.row(r).iter().copied())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize) -> CMatrix {
        CMatrix::from_fn(n, n, |i, j| {
            let s = ((i * 7 + j * 3) % 11) as f64 / 11.0;
            let d = if i == j { i as f64 } else { 0.0 };
            Complex64::new(d + s - 0.5, ((i + j) % 5) as f64 * 0.1)
        })
    }

    #[test]
    fn reconstructs_matrix() {
        let k = sample(12);
        let e = eigen_decompose(&k).unwrap();
        assert!(e.residual < 1e-12);
        let d = CMatrix::from_diagonal(&DVector::from_vec(e.values.clone()));
        let back = &e.vectors * d * &e.inverse;
        assert!((back - &k).norm() < 1e-10 * k.norm());
    }

    #[test]
    fn diagonal_exponential() {
        let k = sample(6);
        let e = eigen_decompose(&k).unwrap();
        let d = CMatrix::from_diagonal(&DVector::from_iterator(6, e.values.iter().map(|z| z.exp())));
        let via_eig = &e.vectors * d * &e.inverse;
        let direct = expm(&k);
        assert!((via_eig - &direct).norm() < 1e-9 * direct.norm());
    }
}
