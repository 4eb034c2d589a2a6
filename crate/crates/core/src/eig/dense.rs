//! Dense generalized symmetric solve for small meshes.

use nalgebra::{DMatrix, SymmetricEigen};

use super::EigError;
use crate::fem::FemMatrices;

/// Lowest `count` eigenpairs of `(S, M)` through `L⁻¹ S L⁻ᵀ` with
/// `M = L Lᵀ`. Checks that exactly `count` eigenvalues lie below `bound`.
pub(super) fn solve(
    fem: &FemMatrices,
    count: usize,
    bound: f64,
) -> Result<(Vec<f64>, DMatrix<f64>), EigError> {
    let m = fem.mass.to_dense();
    let n = m.nrows();
    let s = fem.stiffness.to_dense();
    let chol = m
        .cholesky()
        .ok_or_else(|| EigError::Convergence("mass matrix is not positive definite".into()))?;
    let l = chol.l();
    let ls = l
        .solve_lower_triangular(&s)
        .ok_or_else(|| EigError::Convergence("singular Cholesky factor".into()))?;
    let c = l
        .solve_lower_triangular(&ls.transpose())
        .ok_or_else(|| EigError::Convergence("singular Cholesky factor".into()))?;
    let c = (&c + c.transpose()) * 0.5;
    let eig = SymmetricEigen::new(c);

    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let below = order
        .iter()
        .filter(|&&i| eig.eigenvalues[i] < bound)
        .count();
    if below != count {
        // Tolerate disagreement only for an eigenvalue sitting on the bound.
        let edge = eig.eigenvalues[order[count.min(order.len() - 1)]];
        let prev = eig.eigenvalues[order[count - 1]];
        let near = |x: f64| (x - bound).abs() <= 1e-9 * bound.abs().max(1.0);
        if !(near(edge) || near(prev)) {
            return Err(EigError::CountMismatch {
                expected: count,
                found: below,
            });
        }
    }

    let lt = l.transpose();
    let mut y = DMatrix::zeros(n, count);
    for (k, &i) in order.iter().take(count).enumerate() {
        y.set_column(k, &eig.eigenvectors.column(i));
    }
    let p = lt
        .solve_upper_triangular(&y)
        .ok_or_else(|| EigError::Convergence("singular Cholesky factor".into()))?;
    let lambdas = order
        .iter()
        .take(count)
        .map(|&i| eig.eigenvalues[i])
        .collect();
    Ok((lambdas, p))
}
