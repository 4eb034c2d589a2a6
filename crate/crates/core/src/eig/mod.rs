//! Neumann Laplace eigenpairs `S p = λ M p` on `[0, λ_max]` with
//! `λ_max = (π / l_s_min)² D₀`.
//!
//! The number of eigenvalues below `λ_max` is fixed up front from the
//! inertia of `S − λ_max M`; every solve must reproduce that count. Small
//! problems use a dense Cholesky-reduced solve, larger ones block
//! shift-invert Lanczos over spectrum slices, each slice certified by
//! inertia at its boundaries.

mod dense;
mod lanczos;
mod store;

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::fem::FemMatrices;
use crate::skyline::{factor_combination, FactorError, Profile};

pub use store::{load_eig, read_eig, save_eig, write_eig, MAGIC};

#[derive(Debug, Error)]
pub enum EigError {
    #[error("minimum length scale must be positive and finite, got {0}")]
    InvalidLengthScale(f64),
    #[error("eigenvalue must be non-negative, got {0}")]
    NegativeEigenvalue(f64),
    #[error("factorization at shift {shift} failed after retries: {source}")]
    Factorization {
        shift: f64,
        #[source]
        source: FactorError,
    },
    #[error("inertia reports {expected} eigenvalues in the interval but the solver found {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("eigensolver did not converge: {0}")]
    Convergence(String),
    #[error("eigendecomposition file: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid eigendecomposition file: {0}")]
    Format(String),
    #[error("eigendecomposition was computed for a different mesh")]
    FingerprintMismatch,
}

/// Laplace eigenvalues (ms⁻¹, non-decreasing) and M-orthonormal
/// eigenvectors stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceEig {
    pub lambdas: Vec<f64>,
    pub vectors: DMatrix<f64>,
    pub d0: f64,
    pub ls_min: f64,
    pub fingerprint: [u8; 32],
}

impl LaplaceEig {
    pub fn neig(&self) -> usize {
        self.lambdas.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn lambda_max(&self) -> f64 {
        lambda_max(self.ls_min, self.d0)
    }

    /// Keeps the first `n` modes.
    pub fn truncated(&self, n: usize) -> LaplaceEig {
        let n = n.min(self.neig());
        LaplaceEig {
            lambdas: self.lambdas[..n].to_vec(),
            vectors: self.vectors.columns(0, n).into_owned(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Dense,
    Lanczos,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigOptions {
    /// Meshes with at most this many nodes use the dense solver.
    pub dense_threshold: usize,
    pub block_size: usize,
    /// Acceptance threshold on ‖S p − λ M p‖₂ / (‖S‖∞ ‖p‖₂).
    pub tolerance: f64,
    /// Target number of eigenvalues per spectrum slice.
    pub slice_size: usize,
    pub max_restarts: usize,
    pub shift_retries: usize,
    pub seed: u64,
}

impl Default for EigOptions {
    fn default() -> Self {
        EigOptions {
            dense_threshold: 400,
            block_size: 4,
            tolerance: 1e-10,
            slice_size: 80,
            max_restarts: 40,
            shift_retries: 6,
            seed: 0x5eed_1a9c,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigReport {
    pub solver: SolverKind,
    /// Eigenvalue count below the (possibly perturbed) upper bound.
    pub inertia_count: usize,
    /// Upper bound actually used; differs from `λ_max` only if the
    /// factorization there had to be perturbed.
    pub effective_lambda_max: f64,
    pub slices: usize,
    pub factorizations: usize,
    pub max_residual: f64,
}

/// `(π / l_s_min)² D₀`.
pub fn lambda_max(ls_min: f64, d0: f64) -> f64 {
    (PI / ls_min).powi(2) * d0
}

/// `π / √(λ / D₀)`, infinite at λ = 0.
pub fn length_scale(lambda: f64, d0: f64) -> Result<f64, EigError> {
    if lambda < 0.0 || lambda.is_nan() {
        return Err(EigError::NegativeEigenvalue(lambda));
    }
    if lambda == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(PI / (lambda / d0).sqrt())
}

/// Shared state for inertia queries on `S − σ M`.
pub(crate) struct Pencil<'a> {
    pub fem: &'a FemMatrices,
    pub profile: Arc<Profile>,
    pub factorizations: usize,
    pub retries: usize,
}

impl<'a> Pencil<'a> {
    pub fn new(fem: &'a FemMatrices, retries: usize) -> Self {
        Pencil {
            fem,
            profile: Arc::new(Profile::for_matrix(&fem.mass)),
            factorizations: 0,
            retries,
        }
    }

    /// Factors `S − σ M`, nudging σ upward if the pivot test fails.
    /// Returns the factor and the shift actually used.
    pub fn factor(
        &mut self,
        sigma: f64,
        scale: f64,
    ) -> Result<(crate::skyline::LdlFactor<f64>, f64), EigError> {
        let mut s = sigma;
        let mut last = None;
        for attempt in 0..=self.retries {
            self.factorizations += 1;
            match factor_combination(
                &self.profile,
                &[(&self.fem.stiffness, 1.0), (&self.fem.mass, -s)],
            ) {
                Ok(f) => return Ok((f, s)),
                Err(e) => {
                    log::debug!("factorization at shift {s} failed: {e}");
                    last = Some(e);
                    s = sigma + scale * 1e-7 * (1u64 << attempt) as f64;
                }
            }
        }
        Err(EigError::Factorization {
            shift: sigma,
            source: last.expect("at least one attempt"),
        })
    }

    /// Number of eigenvalues strictly below the returned shift.
    pub fn count_below(&mut self, sigma: f64, scale: f64) -> Result<(usize, f64), EigError> {
        let (f, s) = self.factor(sigma, scale)?;
        Ok((f.negative_pivots(), s))
    }
}

/// Number of generalized eigenvalues of `(S, M)` below `shift`.
pub fn inertia_count(fem: &FemMatrices, shift: f64) -> Result<usize, EigError> {
    let mut pencil = Pencil::new(fem, 0);
    Ok(pencil.count_below(shift, shift.abs().max(1.0))?.0)
}

/// All eigenpairs with λ ≤ (π / l_s_min)² D₀.
pub fn solve_interval(
    fem: &FemMatrices,
    ls_min: f64,
    fingerprint: [u8; 32],
    opts: &EigOptions,
) -> Result<(LaplaceEig, EigReport), EigError> {
    if !(ls_min > 0.0 && ls_min.is_finite()) {
        return Err(EigError::InvalidLengthScale(ls_min));
    }
    let lmax = lambda_max(ls_min, fem.d0);
    let mut pencil = Pencil::new(fem, opts.shift_retries);
    let (count, lmax_eff) = pencil.count_below(lmax, lmax)?;
    if count == 0 {
        return Err(EigError::CountMismatch {
            expected: 1,
            found: 0,
        });
    }

    let n = fem.dim();
    let (lambdas, vectors, solver, slices) = if n <= opts.dense_threshold {
        let (l, v) = dense::solve(fem, count, lmax_eff)?;
        (l, v, SolverKind::Dense, 1)
    } else {
        let out = lanczos::solve(&mut pencil, count, lmax_eff, opts)?;
        (out.lambdas, out.vectors, SolverKind::Lanczos, out.slices)
    };
    if lambdas.len() != count {
        return Err(EigError::CountMismatch {
            expected: count,
            found: lambdas.len(),
        });
    }

    let (lambdas, vectors) = finalize(fem, lambdas, vectors);
    let max_residual = max_relative_residual(fem, &lambdas, &vectors);
    if max_residual > 1e-8 {
        return Err(EigError::Convergence(format!(
            "largest relative residual {max_residual:e} exceeds 1e-8"
        )));
    }
    let report = EigReport {
        solver,
        inertia_count: count,
        effective_lambda_max: lmax_eff,
        slices,
        factorizations: pencil.factorizations,
        max_residual,
    };
    let eig = LaplaceEig {
        lambdas,
        vectors,
        d0: fem.d0,
        ls_min,
        fingerprint,
    };
    Ok((eig, report))
}

/// Exact constant first mode, M-orthogonalization of the rest against it,
/// sign convention and deterministic ordering inside clusters.
fn finalize(
    fem: &FemMatrices,
    mut lambdas: Vec<f64>,
    mut vectors: DMatrix<f64>,
) -> (Vec<f64>, DMatrix<f64>) {
    let n = vectors.nrows();
    let ones = vec![1.0; n];
    let vol = fem.mass.bilinear(&ones, &ones);
    let c = 1.0 / vol.sqrt();
    let p1 = vec![c; n];
    let mp1 = fem.mass.apply(&p1);
    vectors.column_mut(0).fill(c);
    lambdas[0] = fem.stiffness.bilinear(&p1, &p1).max(0.0);
    for k in 1..vectors.ncols() {
        let mut col = vectors.column_mut(k);
        let proj: f64 = col.iter().zip(&mp1).map(|(a, b)| a * b).sum();
        for (v, p) in col.iter_mut().zip(&p1) {
            *v -= proj * p;
        }
        let v: Vec<f64> = col.iter().copied().collect();
        let nrm = fem.mass.bilinear(&v, &v).sqrt();
        col /= nrm;
    }

    for k in 0..vectors.ncols() {
        let mut col = vectors.column_mut(k);
        let big = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if let Some(&first) = col.iter().find(|v| v.abs() > 1e-8 * big) {
            if first < 0.0 {
                col.neg_mut();
            }
        }
    }

    let scale = lambdas.last().copied().unwrap_or(1.0).abs().max(f64::MIN_POSITIVE);
    let mut start = 1;
    while start < lambdas.len() {
        let mut end = start + 1;
        while end < lambdas.len() && lambdas[end] - lambdas[end - 1] <= 1e-8 * lambdas[end].abs().max(1e-8 * scale) {
            end += 1;
        }
        if end - start > 1 {
            let mut idx: Vec<usize> = (start..end).collect();
            idx.sort_by(|&a, &b| {
                for (x, y) in vectors.column(a).iter().zip(vectors.column(b).iter()) {
                    match x.total_cmp(y) {
                        std::cmp::Ordering::Equal => continue,
                        o => return o,
                    }
                }
                std::cmp::Ordering::Equal
            });
            // Eigenvalues stay sorted; inside a cluster they agree to the
            // cluster tolerance, so only the vectors are permuted.
            let cols: Vec<_> = idx.iter().map(|&i| vectors.column(i).into_owned()).collect();
            for (k, col) in cols.into_iter().enumerate() {
                vectors.set_column(start + k, &col);
            }
        }
        start = end;
    }
    (lambdas, vectors)
}

/// max_n ‖S p_n − λ_n M p_n‖₂ / (‖S‖∞ ‖p_n‖₂).
pub fn max_relative_residual(fem: &FemMatrices, lambdas: &[f64], vectors: &DMatrix<f64>) -> f64 {
    let snorm = fem.stiffness.norm_inf();
    let mut worst: f64 = 0.0;
    for (k, &lam) in lambdas.iter().enumerate() {
        let p: Vec<f64> = vectors.column(k).iter().copied().collect();
        let sp = fem.stiffness.apply(&p);
        let mp = fem.mass.apply(&p);
        let r: f64 = sp
            .iter()
            .zip(&mp)
            .map(|(a, b)| (a - lam * b).powi(2))
            .sum::<f64>()
            .sqrt();
        let pn: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(r / (snorm * pn));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::assemble;
    use crate::mesh::generate_box_mesh;

    #[test]
    fn interval_bound_and_length_scale() {
        assert!((lambda_max(4.0, 2.0) - 1.233_700_550_136_169_8).abs() < 1e-12);
        assert!((length_scale(1.233_700_550_136_169_8, 2.0).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(length_scale(0.0, 2.0).unwrap(), f64::INFINITY);
        assert!(length_scale(-1.0, 2.0).is_err());
        let h: f64 = 10.0;
        let lam = 2.0 * PI * PI / (h * h);
        assert!((length_scale(lam, 2.0).unwrap() - h).abs() < 1e-12);
    }

    #[test]
    fn dense_and_lanczos_agree() {
        let mesh = generate_box_mesh([4.0, 2.0, 1.5], [6, 3, 3]).unwrap();
        let fem = assemble(&mesh, 2.0).unwrap();
        let fp = mesh.fingerprint();
        let dense_opts = EigOptions::default();
        let lanczos_opts = EigOptions {
            dense_threshold: 0,
            slice_size: 6,
            ..EigOptions::default()
        };
        let (a, ra) = solve_interval(&fem, 1.2, fp, &dense_opts).unwrap();
        let (b, rb) = solve_interval(&fem, 1.2, fp, &lanczos_opts).unwrap();
        assert_eq!(ra.solver, SolverKind::Dense);
        assert_eq!(rb.solver, SolverKind::Lanczos);
        assert!(rb.slices > 1);
        assert_eq!(a.neig(), b.neig());
        for (x, y) in a.lambdas.iter().zip(&b.lambdas) {
            assert!((x - y).abs() <= 1e-9 * y.max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn rejects_bad_length_scale() {
        let mesh = generate_box_mesh([1.0; 3], [1; 3]).unwrap();
        let fem = assemble(&mesh, 2.0).unwrap();
        let err = solve_interval(&fem, 0.0, [0; 32], &EigOptions::default()).unwrap_err();
        assert!(matches!(err, EigError::InvalidLengthScale(_)));
    }
}
