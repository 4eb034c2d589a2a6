//! Matrix Formalism: the reduced signal model in the Laplace eigenbasis.
//!
//! With `L = diag(λ)`, moment matrices `A^i = Pᵀ J^i P` and
//! `K(g) = L + iγ Σ g_i A^i`, the PGSE echo is
//! `S = ρ|Ω| [e^{−Kδ} e^{−L(Δ−δ)} e^{−K̄δ}]₁₁`. Because `K` is complex
//! symmetric the first row of `e^{−Kδ}` equals its first column, so only
//! that row is needed: `H₁₁ = Σ_k |x_k|² e^{−λ_k(Δ−δ)}`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::eig::LaplaceEig;
use crate::fem::FemMatrices;
use crate::linalg::{eigen_decompose, expm, CMatrix};
use crate::mesh::Point;
use crate::records::{Method, SignalRecord};
use crate::seq::{Gradient, Pgse};
use crate::units::{b_to_internal, GAMMA};

/// Above this condition number of V the direct exponential is used.
pub const CONDITION_LIMIT: f64 = 1e8;
/// Above this relative residual ‖KV − VΣ‖/‖K‖ the direct exponential is used.
pub const RESIDUAL_LIMIT: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("eigendecomposition belongs to a different mesh")]
    FingerprintMismatch,
    #[error("eigenvectors have {eig} rows but the FEM matrices have dimension {fem}")]
    DimensionMismatch { eig: usize, fem: usize },
    #[error("mode subset must contain the constant mode (index 0)")]
    MissingConstantMode,
    #[error("mode index {index} out of range for {neig} modes")]
    ModeOutOfRange { index: usize, neig: usize },
    #[error("eigenvalue must be non-negative, got {0}")]
    NegativeEigenvalue(f64),
    #[error("b-value must be non-negative, got {0}")]
    InvalidBValue(f64),
    #[error("initial density must be positive and finite, got {0}")]
    InvalidDensity(f64),
}

/// The complete reduced model.
#[derive(Debug, Clone)]
pub struct MfModel {
    /// λ_n in ms⁻¹, λ₁ = 0.
    pub lambdas: Vec<f64>,
    /// A^x, A^y, A^z about `centroid` (μm).
    pub moments: [DMatrix<f64>; 3],
    /// Domain centroid in mesh coordinates (μm).
    pub centroid: Point,
    /// |Ω| in μm³.
    pub volume: f64,
    pub rho: f64,
    pub d0: f64,
}

/// Whether the echo used the eigendecomposition or the direct exponential.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Propagation {
    Diagonalized,
    DirectExponential,
}

/// Row 1 of e^{−Kδ} and how it was computed.
#[derive(Debug, Clone)]
pub struct FirstRow {
    pub row: Vec<Complex64>,
    pub path: Propagation,
    pub condition: f64,
    pub residual: f64,
}

impl MfModel {
    /// Projects the FEM moments onto the eigenbasis and centers them.
    pub fn build(
        eig: &LaplaceEig,
        fem: &FemMatrices,
        rho: f64,
        mesh_fingerprint: &[u8; 32],
    ) -> Result<MfModel, SignalError> {
        if &eig.fingerprint != mesh_fingerprint {
            return Err(SignalError::FingerprintMismatch);
        }
        if eig.n_nodes() != fem.dim() {
            return Err(SignalError::DimensionMismatch {
                eig: eig.n_nodes(),
                fem: fem.dim(),
            });
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(SignalError::InvalidDensity(rho));
        }
        let p = &eig.vectors;
        let ones = vec![1.0; fem.dim()];
        let volume = fem.mass.bilinear(&ones, &ones);
        let mut centroid = fem.origin;
        let moments = [0, 1, 2].map(|i| {
            let jp = fem.moments[i].mul_dense(p);
            let a = p.transpose() * jp;
            let mut a = (&a + a.transpose()) * 0.5;
            // φ₁ is constant, so A_11 is the centroid offset from the origin.
            let c = a[(0, 0)];
            centroid[i] += c;
            for k in 0..a.nrows() {
                a[(k, k)] -= c;
            }
            a
        });
        Ok(MfModel {
            lambdas: eig.lambdas.clone(),
            moments,
            centroid,
            volume,
            rho,
            d0: eig.d0,
        })
    }

    pub fn neig(&self) -> usize {
        self.lambdas.len()
    }

    pub fn s0(&self) -> f64 {
        self.rho * self.volume
    }

    /// `n + 3n(n − 1)/2`: L diagonal plus the off-diagonal entries of
    /// three symmetric moment matrices.
    pub fn parameter_count(&self) -> usize {
        parameter_count(self.neig())
    }

    /// a_{1n} in mesh coordinates: first rows of the uncentered moments.
    pub fn first_row(&self, n: usize) -> [f64; 3] {
        [0, 1, 2].map(|i| {
            let a = self.moments[i][(0, n)];
            if n == 0 {
                a + self.centroid[i]
            } else {
                a
            }
        })
    }

    /// Σ_n (a^i_{1n})² over the retained modes, in mesh coordinates.
    pub fn parseval_sums(&self) -> [f64; 3] {
        let mut s = [0.0; 3];
        for n in 0..self.neig() {
            let a = self.first_row(n);
            for i in 0..3 {
                s[i] += a[i] * a[i];
            }
        }
        s
    }

    /// Model restricted to the modes in `keep` (0-based, must include 0).
    pub fn restricted(&self, keep: &[usize]) -> Result<MfModel, SignalError> {
        if !keep.contains(&0) {
            return Err(SignalError::MissingConstantMode);
        }
        let n = self.neig();
        if let Some(&bad) = keep.iter().find(|&&k| k >= n) {
            return Err(SignalError::ModeOutOfRange { index: bad, neig: n });
        }
        let moments = [0, 1, 2].map(|i| {
            DMatrix::from_fn(keep.len(), keep.len(), |r, c| self.moments[i][(keep[r], keep[c])])
        });
        Ok(MfModel {
            lambdas: keep.iter().map(|&k| self.lambdas[k]).collect(),
            moments,
            ..self.clone()
        })
    }

    /// The leading modes, extended so that no eigenvalue cluster is split.
    pub fn leading(&self, n: usize) -> MfModel {
        let n = cluster_end(&self.lambdas, n.max(1));
        self.restricted(&(0..n).collect::<Vec<_>>())
            .expect("leading modes include the constant mode")
    }

    /// K(g) = L + iγ Σ g_i A^i.
    pub fn k_matrix(&self, g: [f64; 3]) -> CMatrix {
        let n = self.neig();
        let mut k = CMatrix::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                let w = g[0] * self.moments[0][(r, c)]
                    + g[1] * self.moments[1][(r, c)]
                    + g[2] * self.moments[2][(r, c)];
                k[(r, c)] = Complex64::new(0.0, GAMMA * w);
            }
            k[(r, r)] += self.lambdas[r];
        }
        k
    }

    /// Row 1 of e^{−Kδ}, by diagonalization when V is well conditioned.
    pub fn first_row_propagator(&self, g: [f64; 3], delta: f64) -> FirstRow {
        let k = self.k_matrix(g);
        if let Some(e) = eigen_decompose(&k) {
            if e.condition <= CONDITION_LIMIT && e.residual <= RESIDUAL_LIMIT {
                let n = self.neig();
                let w: Vec<Complex64> = (0..n)
                    .map(|j| e.vectors[(0, j)] * (-e.values[j] * delta).exp())
                    .collect();
                let row = (0..n)
                    .map(|c| (0..n).map(|j| w[j] * e.inverse[(j, c)]).sum())
                    .collect();
                return FirstRow {
                    row,
                    path: Propagation::Diagonalized,
                    condition: e.condition,
                    residual: e.residual,
                };
            }
            log::debug!(
                "falling back to direct exponential: cond(V) = {:e}, residual = {:e}",
                e.condition,
                e.residual
            );
            let x = expm(&(k * Complex64::new(-delta, 0.0)));
            return FirstRow {
                row: x.row(0).iter().copied().collect(),
                path: Propagation::DirectExponential,
                condition: e.condition,
                residual: e.residual,
            };
        }
        let x = expm(&(k * Complex64::new(-delta, 0.0)));
        FirstRow {
            row: x.row(0).iter().copied().collect(),
            path: Propagation::DirectExponential,
            condition: f64::INFINITY,
            residual: f64::INFINITY,
        }
    }

    /// H₁₁ for a PGSE sequence.
    pub fn h11(&self, g: [f64; 3], seq: &Pgse) -> Complex64 {
        let x = self.first_row_propagator(g, seq.delta());
        let gap = seq.big_delta() - seq.delta();
        x.row
            .iter()
            .zip(&self.lambdas)
            .map(|(xk, &l)| xk * (-l * gap).exp() * xk.conj())
            .sum()
    }

    /// The full matrix H, with the two exponential orderings selectable.
    pub fn h_matrix(&self, g: [f64; 3], seq: &Pgse, reversed: bool) -> CMatrix {
        let k = self.k_matrix(g);
        let d = Complex64::new(-seq.delta(), 0.0);
        let ek = expm(&(&k * d));
        let ekc = expm(&(k.map(|z| z.conj()) * d));
        let gap = seq.big_delta() - seq.delta();
        let mid = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            self.neig(),
            self.lambdas.iter().map(|&l| Complex64::new((-l * gap).exp(), 0.0)),
        ));
        if reversed {
            ekc * mid * ek
        } else {
            ek * mid * ekc
        }
    }

    /// D^MF = D₀ Σ_n J(λ_n) a_{1n} a_{1n}ᵀ in μm²/ms.
    pub fn diffusion_tensor(&self, seq: &Pgse) -> [[f64; 3]; 3] {
        let mut d = [[0.0; 3]; 3];
        for n in 1..self.neig() {
            let j = j_factor(self.lambdas[n].max(0.0), seq, self.d0).expect("non-negative");
            let a = self.first_row(n);
            for r in 0..3 {
                for c in 0..3 {
                    d[r][c] += self.d0 * j * a[r] * a[c];
                }
            }
        }
        d
    }

    /// u_gᵀ D^MF u_g.
    pub fn adc(&self, seq: &Pgse, u: [f64; 3]) -> f64 {
        let d = self.diffusion_tensor(seq);
        let mut s = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                s += u[r] * d[r][c] * u[c];
            }
        }
        s
    }
}

/// Smallest `m ≥ n` such that λ_m and λ_{m+1} (1-based) are not in the same
/// cluster (relative gap above 1e-8), capped at the number of modes.
pub fn cluster_end(lambdas: &[f64], n: usize) -> usize {
    let mut m = n.min(lambdas.len());
    while m > 0 && m < lambdas.len() {
        let (a, b) = (lambdas[m - 1], lambdas[m]);
        if b - a > 1e-8 * b.abs().max(f64::MIN_POSITIVE) {
            break;
        }
        m += 1;
    }
    m
}

pub fn parameter_count(n: usize) -> usize {
    n + 3 * n * n.saturating_sub(1) / 2
}

/// S^MF for one gradient and sequence.
pub fn mf_signal(model: &MfModel, g: &Gradient, seq: &Pgse) -> SignalRecord {
    let h = model.h11(g.vector(), seq);
    let mut rec = SignalRecord::new(Method::Mf, *seq, *g, h * model.s0(), model.s0());
    rec.neig = Some(model.neig());
    rec
}

/// S^MF using only the modes in `keep` (0-based; must include 0).
pub fn mf_signal_subset(
    model: &MfModel,
    keep: &[usize],
    g: &Gradient,
    seq: &Pgse,
) -> Result<SignalRecord, SignalError> {
    Ok(mf_signal(&model.restricted(keep)?, g, seq))
}

/// S^MFGA = ρ|Ω| exp(−u_gᵀ D^MF u_g · b), with b in s/mm².
pub fn mfga_signal(
    model: &MfModel,
    b: f64,
    g: &Gradient,
    seq: &Pgse,
) -> Result<SignalRecord, SignalError> {
    if !(b >= 0.0 && b.is_finite()) {
        return Err(SignalError::InvalidBValue(b));
    }
    let adc = model.adc(seq, g.direction());
    let s = model.s0() * (-adc * b_to_internal(b)).exp();
    let mut rec = SignalRecord::new(Method::Mfga, *seq, *g, Complex64::new(s, 0.0), model.s0());
    rec.bvalue = b;
    rec.neig = Some(model.neig());
    Ok(rec)
}

/// J(λ, f) = λ ∫F(t) ∫₀ᵗ e^{−λ(t−s)} f(s) ds dt / (D₀ ∫F²) for PGSE.
pub fn j_factor(lambda: f64, seq: &Pgse, d0: f64) -> Result<f64, SignalError> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(SignalError::NegativeEigenvalue(lambda));
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let delta = seq.delta();
    let gap = seq.big_delta() - delta;
    let x = lambda * delta;
    let y = lambda * gap;
    let g1 = delta * expm1_ratio(x);
    let g2 = g1 * (-y).exp();
    let i1 = delta.powi(3) * h1(x);
    let i2 = delta * g1 * gap * expm1_ratio(y);
    let i3 = delta.powi(3) * h3(x) + g2 * delta * delta * e3(x);
    Ok(lambda * (i1 + i2 + i3) / (d0 * seq.time_factor()))
}

const SERIES_CUTOFF: f64 = 1.0;
const SERIES_TERMS: i32 = 24;

/// Σ_{n≥start} c(n) xⁿ⁻ᵒᶠᶠˢᵉᵗ / n!, summed from the smallest term.
fn series(x: f64, start: i32, offset: i32, coef: impl Fn(i32) -> f64) -> f64 {
    let mut terms = Vec::with_capacity(SERIES_TERMS as usize);
    let mut fact = (1..start).fold(1.0, |f, k| f * k as f64);
    for n in start..start + SERIES_TERMS {
        fact *= n as f64;
        terms.push(coef(n) * x.powi(n - offset) / fact);
    }
    terms.iter().rev().sum()
}

fn sign(n: i32) -> f64 {
    if n % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// (1 − e^{−x}) / x.
fn expm1_ratio(x: f64) -> f64 {
    if x < SERIES_CUTOFF {
        series(x, 1, 1, |n| sign(n + 1))
    } else {
        -(-x).exp_m1() / x
    }
}

/// (1 − e^{−x}(1 + x)) / x².
fn e2(x: f64) -> f64 {
    if x < SERIES_CUTOFF {
        series(x, 2, 2, |n| sign(n) * (n - 1) as f64)
    } else {
        (1.0 - (-x).exp() * (1.0 + x)) / (x * x)
    }
}

/// (x − 1 + e^{−x}) / x².
fn e3(x: f64) -> f64 {
    if x < SERIES_CUTOFF {
        series(x, 2, 2, sign)
    } else {
        (x + (-x).exp_m1()) / (x * x)
    }
}

/// (½ − e2(x)) / x.
fn h1(x: f64) -> f64 {
    if x < SERIES_CUTOFF {
        series(x, 3, 3, |n| sign(n + 1) * (n - 1) as f64)
    } else {
        (0.5 - e2(x)) / x
    }
}

/// (e3(x) − ½) / x.
fn h3(x: f64) -> f64 {
    if x < SERIES_CUTOFF {
        series(x, 3, 3, sign)
    } else {
        (e3(x) - 0.5) / x
    }
}
