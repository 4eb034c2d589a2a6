//! Eigenmodes of the Bloch-Torrey operator expressed in the Laplace basis.
//!
//! Diagonalizing `K(g) = V Σ V⁻¹` gives BT eigenvalues `μ_j = Σ_jj` and
//! eigenfunctions `ψ_j = Σ_n (V⁻¹)_{jn} φ_n`. Each ψ_j is rescaled to unit
//! L² norm (the Euclidean norm of its coefficient row, since the φ_n are
//! orthonormal) and its projection coefficient `V_{1j}` is scaled by the
//! same factor, so `ρ√|Ω| Σ_j V_{1j} ψ_j` is unchanged. All significance
//! thresholds apply to these normalized quantities.

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::eig::LaplaceEig;
use crate::linalg::{eigen_decompose, CMatrix};
use crate::mf::MfModel;
use crate::seq::Pgse;

/// V is flagged as ill-conditioned above this condition number.
pub const ILL_CONDITIONED: f64 = 1e10;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("BT mode index {index} out of range for {count} modes")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("eigendecomposition of K(g) failed")]
    Diagonalization,
    #[error("eigenvectors have {eig} modes but the model has {model}")]
    ModeMismatch { eig: usize, model: usize },
    #[error("time must be non-negative, got {0}")]
    NegativeTime(f64),
}

#[derive(Debug, Clone)]
pub struct BtEig {
    /// μ_j in ms⁻¹, sorted by real part then imaginary part.
    pub mus: Vec<Complex64>,
    /// V with unit 2-norm columns, in the order of `mus`.
    pub vectors: CMatrix,
    /// V⁻¹, rows in the order of `mus`.
    pub inverse: CMatrix,
    /// ‖row_j(V⁻¹)‖₂, the L² norm of the unnormalized ψ_j.
    pub psi_norms: Vec<f64>,
    pub gradient: [f64; 3],
    pub condition: f64,
    pub residual: f64,
    /// Set when cond(V) exceeds [`ILL_CONDITIONED`].
    pub ill_conditioned: bool,
}

impl BtEig {
    pub fn len(&self) -> usize {
        self.mus.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mus.is_empty()
    }

    fn check(&self, j: usize) -> Result<(), SpectralError> {
        if j >= self.len() {
            return Err(SpectralError::IndexOutOfRange {
                index: j,
                count: self.len(),
            });
        }
        Ok(())
    }

    /// Laplace coefficients of the unit-norm ψ_j.
    pub fn psi_coefficients(&self, j: usize) -> Result<Vec<Complex64>, SpectralError> {
        self.check(j)?;
        let s = self.psi_norms[j];
        Ok(self.inverse.row(j).iter().map(|z| z / s).collect())
    }

    /// Projection coefficient of the constant initial density onto the
    /// unit-norm ψ_j: `V_{1j} ‖row_j(V⁻¹)‖`.
    pub fn projection(&self, j: usize) -> Complex64 {
        self.vectors[(0, j)] * self.psi_norms[j]
    }

    /// Indices with |projection| ≥ `threshold`.
    pub fn significant(&self, threshold: f64) -> Vec<usize> {
        (0..self.len())
            .filter(|&j| self.projection(j).norm() >= threshold)
            .collect()
    }

    /// A(δ)_{jk} = V_{1j} e^{−μ_j δ} (V⁻¹)_{jk}.
    pub fn a_delta(&self, delta: f64) -> Result<CMatrix, SpectralError> {
        if !(delta >= 0.0) {
            return Err(SpectralError::NegativeTime(delta));
        }
        let n = self.len();
        Ok(CMatrix::from_fn(n, n, |j, k| {
            self.vectors[(0, j)] * (-self.mus[j] * delta).exp() * self.inverse[(j, k)]
        }))
    }

    /// Column sums of A(δ): the Laplace coefficients c_k(δ) of the
    /// magnetization after the first pulse, in units of ρ√|Ω|.
    pub fn laplace_coefficients(&self, delta: f64) -> Result<Vec<Complex64>, SpectralError> {
        let a = self.a_delta(delta)?;
        Ok(a.column_iter().map(|c| c.iter().sum()).collect())
    }

    /// Laplace coefficients of M(TE)/(ρ√|Ω|) for the PGSE echo.
    pub fn echo_coefficients(&self, lambdas: &[f64], seq: &Pgse) -> Vec<Complex64> {
        let n = self.len();
        let delta = seq.delta();
        let gap = seq.big_delta() - delta;
        let x = self.laplace_coefficients(delta).expect("delta is positive");
        let xe: Vec<Complex64> = x
            .iter()
            .zip(lambdas)
            .map(|(v, &l)| v * (-l * gap).exp())
            .collect();
        // (xe · conj(V⁻¹)) ∘ conj(e^{−μδ}), then · conj(V).
        let y: Vec<Complex64> = (0..n)
            .map(|j| {
                let s: Complex64 = (0..n).map(|k| xe[k] * self.inverse[(j, k)].conj()).sum();
                s * (-self.mus[j] * delta).exp().conj()
            })
            .collect();
        (0..n)
            .map(|m| (0..n).map(|j| y[j] * self.vectors[(m, j)].conj()).sum())
            .collect()
    }
}

/// Diagonalizes K(g) for the model.
pub fn bt_eigendecomposition(model: &MfModel, g: [f64; 3]) -> Result<BtEig, SpectralError> {
    let n = model.neig();
    let k = model.k_matrix(g);
    let (mus, vectors, inverse, condition, residual) = if g == [0.0; 3] {
        let mus = model.lambdas.iter().map(|&l| Complex64::new(l, 0.0)).collect();
        (mus, CMatrix::identity(n, n), CMatrix::identity(n, n), 1.0, 0.0)
    } else {
        let e = eigen_decompose(&k).ok_or(SpectralError::Diagonalization)?;
        (e.values, e.vectors, e.inverse, e.condition, e.residual)
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        mus[a]
            .re
            .total_cmp(&mus[b].re)
            .then(mus[a].im.total_cmp(&mus[b].im))
    });
    let mus: Vec<Complex64> = order.iter().map(|&i| mus[i]).collect();
    let vectors = CMatrix::from_fn(n, n, |r, c| vectors[(r, order[c])]);
    let inverse = CMatrix::from_fn(n, n, |r, c| inverse[(order[r], c)]);
    let psi_norms = (0..n).map(|j| inverse.row(j).norm()).collect();
    if condition > ILL_CONDITIONED {
        log::warn!("BT eigenvector matrix is ill-conditioned (cond = {condition:e})");
    }
    Ok(BtEig {
        mus,
        vectors,
        inverse,
        psi_norms,
        gradient: g,
        condition,
        residual,
        ill_conditioned: condition > ILL_CONDITIONED,
    })
}

/// Nodal values of the unit-norm ψ_j.
pub fn psi_nodal(bt: &BtEig, eig: &LaplaceEig, j: usize) -> Result<Vec<Complex64>, SpectralError> {
    if eig.neig() != bt.len() {
        return Err(SpectralError::ModeMismatch {
            eig: eig.neig(),
            model: bt.len(),
        });
    }
    let c = bt.psi_coefficients(j)?;
    Ok(nodal_field(&eig.vectors, &c))
}

fn nodal_field(p: &DMatrix<f64>, coeffs: &[Complex64]) -> Vec<Complex64> {
    const CHUNK: usize = 1024;
    let mut out = Vec::with_capacity(p.nrows());
    for start in (0..p.nrows()).step_by(CHUNK) {
        let end = (start + CHUNK).min(p.nrows());
        for i in start..end {
            out.push(coeffs.iter().enumerate().map(|(n, c)| c * p[(i, n)]).sum());
        }
    }
    out
}

/// Nodes where |ψ_j| ≥ `frac` · max |ψ_j|, with their |ψ_j| values.
pub fn support_region(
    bt: &BtEig,
    eig: &LaplaceEig,
    j: usize,
    frac: f64,
) -> Result<Vec<(usize, f64)>, SpectralError> {
    let psi = psi_nodal(bt, eig, j)?;
    let mags: Vec<f64> = psi.iter().map(|z| z.norm()).collect();
    let max = mags.iter().copied().fold(0.0, f64::max);
    Ok(mags
        .into_iter()
        .enumerate()
        .filter(|&(_, m)| m >= frac * max)
        .collect())
}

/// Nodal magnetization at the echo time, reconstructed from the BT modes.
pub fn magnetization_at_echo(
    bt: &BtEig,
    eig: &LaplaceEig,
    model: &MfModel,
    seq: &Pgse,
) -> Result<Vec<Complex64>, SpectralError> {
    if eig.neig() != bt.len() || model.neig() != bt.len() {
        return Err(SpectralError::ModeMismatch {
            eig: eig.neig(),
            model: model.neig(),
        });
    }
    let d = bt.echo_coefficients(&model.lambdas, seq);
    let scale = model.rho * model.volume.sqrt();
    let d: Vec<Complex64> = d.iter().map(|z| z * scale).collect();
    Ok(nodal_field(&eig.vectors, &d))
}

/// Signal implied by the echo coefficients: ρ|Ω| d₁.
pub fn echo_signal(bt: &BtEig, model: &MfModel, seq: &Pgse) -> Complex64 {
    bt.echo_coefficients(&model.lambdas, seq)[0] * model.s0()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> MfModel {
        let a = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.2, 1.0, 0.0, 0.5, 0.2, 0.5, 0.0]);
        MfModel {
            lambdas: vec![0.0, 0.3, 0.9],
            moments: [a.clone(), a.scale(0.5), DMatrix::zeros(3, 3)],
            centroid: [0.0; 3],
            volume: 8.0,
            rho: 1.0,
            d0: 2.0,
        }
    }

    #[test]
    fn zero_gradient_is_identity() {
        let bt = bt_eigendecomposition(&model(), [0.0; 3]).unwrap();
        assert_eq!(bt.mus[1], Complex64::new(0.3, 0.0));
        assert_eq!(bt.significant(0.01), vec![0]);
        let a = bt.a_delta(2.0).unwrap();
        assert_eq!(a[(0, 0)], Complex64::new(1.0, 0.0));
        assert_eq!(a.iter().filter(|z| z.norm() > 0.0).count(), 1);
    }

    #[test]
    fn psi_rows_have_unit_norm() {
        let bt = bt_eigendecomposition(&model(), [0.2, 0.0, 0.1]).unwrap();
        for j in 0..bt.len() {
            let c = bt.psi_coefficients(j).unwrap();
            let n: f64 = c.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert!(bt.psi_coefficients(3).is_err());
    }

    #[test]
    fn projections_reconstruct_constant() {
        let bt = bt_eigendecomposition(&model(), [0.3, 0.1, 0.0]).unwrap();
        for k in 0..3 {
            let s: Complex64 = (0..3)
                .map(|j| bt.projection(j) * bt.psi_coefficients(j).unwrap()[k])
                .sum();
            let expect = if k == 0 { 1.0 } else { 0.0 };
            assert!((s - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn echo_signal_matches_matrix_formalism() {
        let m = model();
        let g = [0.25, 0.05, 0.0];
        let seq = Pgse::new(1.5, 4.0).unwrap();
        let bt = bt_eigendecomposition(&m, g).unwrap();
        let direct = m.h11(g, &seq) * m.s0();
        let recon = echo_signal(&bt, &m, &seq);
        assert!((direct - recon).norm() < 1e-12 * direct.norm());
    }
}
