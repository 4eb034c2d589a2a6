//! Block shift-invert Lanczos with full M-reorthogonalization, locking and
//! spectrum slicing.
//!
//! Each slice `[a, b]` is handled with one factorization of `S − σ M`,
//! σ at the slice midpoint. The Krylov basis of `(S − σM)⁻¹M` is kept
//! M-orthonormal against itself and all locked vectors, so eigenvalues
//! found in earlier slices (and the constant mode) never reappear.
//! Multiple eigenvalues are recovered by the block start and, beyond the
//! block size, by restarting with fresh vectors after locking.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EigError, EigOptions, Pencil};
use crate::skyline::LdlFactor;
use crate::sparse::SparseSym;

pub(super) struct LanczosOutput {
    pub lambdas: Vec<f64>,
    pub vectors: DMatrix<f64>,
    pub slices: usize,
}

struct Locked {
    vecs: Vec<Vec<f64>>,
    mvecs: Vec<Vec<f64>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Classical Gram-Schmidt, two passes, in the M inner product. Returns the
/// normalized vector and its M-image, or `None` if `w` collapsed.
fn orthonormalize(
    mut w: Vec<f64>,
    mass: &SparseSym,
    against: &[(&[Vec<f64>], &[Vec<f64>])],
) -> Option<(Vec<f64>, Vec<f64>)> {
    let mw0 = mass.apply(&w);
    let n0 = dot(&w, &mw0).max(0.0).sqrt();
    if n0 == 0.0 || !n0.is_finite() {
        return None;
    }
    for _ in 0..2 {
        for (vecs, mvecs) in against {
            let coeffs: Vec<f64> = mvecs.iter().map(|mv| dot(mv, &w)).collect();
            for (c, v) in coeffs.iter().zip(vecs.iter()) {
                axpy(-c, v, &mut w);
            }
        }
    }
    let mut mw = mass.apply(&w);
    let nrm = dot(&w, &mw).max(0.0).sqrt();
    if nrm <= 1e-10 * n0 {
        return None;
    }
    w.iter_mut().for_each(|v| *v /= nrm);
    mw.iter_mut().for_each(|v| *v /= nrm);
    Some((w, mw))
}

/// Solves `(S − σM) x = b` with the LDLᵀ factor plus iterative refinement.
/// Unpivoted LDLᵀ of the indefinite shifted matrix can lose digits; without
/// refinement Ritz residuals stall above the acceptance tolerance on fine
/// meshes.
fn refined_solve(factor: &LdlFactor<f64>, stiff: &SparseSym, mass: &SparseSym, sigma: f64, b: &[f64]) -> Vec<f64> {
    let mut x = factor.solve(b);
    let bn = dot(b, b).sqrt();
    for _ in 0..3 {
        let sx = stiff.apply(&x);
        let mx = mass.apply(&x);
        let r: Vec<f64> = b.iter().zip(sx.iter().zip(&mx)).map(|(bi, (s, m))| bi - s + sigma * m).collect();
        if dot(&r, &r).sqrt() <= 1e-15 * bn {
            break;
        }
        let dx = factor.solve(&r);
        axpy(1.0, &dx, &mut x);
    }
    x
}

struct Ritz {
    lambda: f64,
    vec: Vec<f64>,
}

pub(super) fn solve(
    pencil: &mut Pencil,
    count: usize,
    upper: f64,
    opts: &EigOptions,
) -> Result<LanczosOutput, EigError> {
    let fem = pencil.fem;
    let mass = &fem.mass;
    let stiff = &fem.stiffness;
    let n = fem.dim();
    let snorm = stiff.norm_inf();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let ones = vec![1.0; n];
    let c = 1.0 / mass.bilinear(&ones, &ones).sqrt();
    let p1 = vec![c; n];
    let mp1 = mass.apply(&p1);
    let mut locked = Locked {
        vecs: vec![p1],
        mvecs: vec![mp1],
    };
    if count == 1 {
        return Ok(assemble(fem, locked, 1));
    }

    // Equal-count slices by Weyl's law N(λ) ∝ λ^{3/2}.
    let k = (count - 1).div_ceil(opts.slice_size.max(1)).max(1);
    let mut bounds = Vec::with_capacity(k + 1);
    bounds.push((0.0, 1usize));
    for i in 1..k {
        let b = upper * (i as f64 / k as f64).powf(2.0 / 3.0);
        let (cnt, b) = pencil.count_below(b, upper)?;
        bounds.push((b, cnt));
    }
    bounds.push((upper, count));

    let p = opts.block_size.max(1);
    let slack = 1e-9 * upper;
    let mut slices = 0;
    for w in bounds.windows(2) {
        let ((a, _), (b, nu_b)) = (w[0], w[1]);
        if nu_b <= locked.vecs.len() {
            continue;
        }
        slices += 1;
        let sigma = 0.5 * (a + b);
        let (factor, sigma) = pencil.factor(sigma, upper)?;
        let mut restarts = 0;
        let mut carry: Vec<Vec<f64>> = Vec::new();
        loop {
            let target = nu_b.saturating_sub(locked.vecs.len());
            if target == 0 {
                break;
            }
            if restarts > opts.max_restarts {
                return Err(EigError::Convergence(format!(
                    "slice [{a:.6e}, {b:.6e}] still missing {target} eigenpairs after {restarts} restarts"
                )));
            }
            restarts += 1;
            let room = n - locked.vecs.len();
            let m_max = room.min((3 * target + 4 * p).max(60) + 2 * carry.len() + restarts * p);

            let mut q: Vec<Vec<f64>> = Vec::new();
            let mut mq: Vec<Vec<f64>> = Vec::new();
            let mut wq: Vec<Vec<f64>> = Vec::new();
            let push_random = |q: &mut Vec<Vec<f64>>, mq: &mut Vec<Vec<f64>>, rng: &mut ChaCha8Rng, locked: &Locked| {
                for _ in 0..8 {
                    let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let against = [(&locked.vecs[..], &locked.mvecs[..]), (&q[..], &mq[..])];
                    if let Some((v, mv)) = orthonormalize(r, mass, &against) {
                        q.push(v);
                        mq.push(mv);
                        return true;
                    }
                }
                false
            };
            // Thick restart: continue from the unconverged Ritz vectors.
            for v in carry.drain(..) {
                if q.len() + p >= m_max {
                    break;
                }
                let against = [(&locked.vecs[..], &locked.mvecs[..]), (&q[..], &mq[..])];
                if let Some((v, mv)) = orthonormalize(v, mass, &against) {
                    q.push(v);
                    mq.push(mv);
                }
            }
            for _ in 0..p.min(m_max - q.len()) {
                push_random(&mut q, &mut mq, &mut rng, &locked);
            }

            let mut found: Vec<Ritz> = Vec::new();
            let mut next_check = (target + p).min(m_max);
            let mut applied = 0;
            while applied < q.len() {
                let w = refined_solve(&factor, stiff, mass, sigma, &mq[applied]);
                wq.push(w.clone());
                applied += 1;
                if q.len() < m_max {
                    let against = [(&locked.vecs[..], &locked.mvecs[..]), (&q[..], &mq[..])];
                    match orthonormalize(w, mass, &against) {
                        Some((v, mv)) => {
                            q.push(v);
                            mq.push(mv);
                        }
                        None => {
                            push_random(&mut q, &mut mq, &mut rng, &locked);
                        }
                    }
                }
                if applied >= next_check || applied == q.len() {
                    (found, carry) = rayleigh_ritz(
                        &q[..applied],
                        &mq[..applied],
                        &wq,
                        sigma,
                        (a - slack, b + slack),
                        stiff,
                        snorm,
                        opts.tolerance,
                    );
                    if found.len() >= target {
                        break;
                    }
                    next_check = applied + p.max(applied / 4);
                }
            }
            found.sort_by(|x, y| x.lambda.total_cmp(&y.lambda));
            found.truncate(target);
            log::debug!(
                "slice [{a:.4e}, {b:.4e}]: {} of {target} pairs after {applied} operator applications",
                found.len()
            );
            for r in found {
                // Lock with re-orthogonalization to keep the locked set clean.
                let against = [(&locked.vecs[..], &locked.mvecs[..])];
                if let Some((v, mv)) = orthonormalize(r.vec, mass, &against) {
                    locked.vecs.push(v);
                    locked.mvecs.push(mv);
                }
            }
        }
    }
    if locked.vecs.len() != count {
        return Err(EigError::CountMismatch {
            expected: count,
            found: locked.vecs.len(),
        });
    }
    Ok(assemble(fem, locked, slices))
}

#[allow(clippy::too_many_arguments)]
fn rayleigh_ritz(
    q: &[Vec<f64>],
    mq: &[Vec<f64>],
    wq: &[Vec<f64>],
    sigma: f64,
    range: (f64, f64),
    stiff: &SparseSym,
    snorm: f64,
    tol: f64,
) -> (Vec<Ritz>, Vec<Vec<f64>>) {
    let m = q.len();
    let mut t = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let v = 0.5 * (dot(&mq[i], &wq[j]) + dot(&mq[j], &wq[i]));
            t[(i, j)] = v;
            t[(j, i)] = v;
        }
    }
    let eig = SymmetricEigen::new(t);
    let n = q[0].len();
    let mut out = Vec::new();
    let mut pending = Vec::new();
    for k in 0..m {
        let theta = eig.eigenvalues[k];
        if theta.abs() < f64::MIN_POSITIVE.sqrt() {
            continue;
        }
        let lam = sigma + 1.0 / theta;
        if lam < range.0 || lam > range.1 {
            continue;
        }
        let y = eig.eigenvectors.column(k);
        let mut x = vec![0.0; n];
        let mut mx = vec![0.0; n];
        for i in 0..m {
            axpy(y[i], &q[i], &mut x);
            axpy(y[i], &mq[i], &mut mx);
        }
        let sx = stiff.apply(&x);
        let xm = dot(&x, &mx);
        let rq = dot(&x, &sx) / xm;
        let r: f64 = sx
            .iter()
            .zip(&mx)
            .map(|(s, v)| (s - rq * v).powi(2))
            .sum::<f64>()
            .sqrt();
        let xn = dot(&x, &x).sqrt();
        if r <= tol * snorm * xn && rq >= range.0 && rq <= range.1 {
            out.push(Ritz { lambda: rq, vec: x });
        } else {
            pending.push(x);
        }
    }
    (out, pending)
}

/// Final Rayleigh-Ritz over all locked non-constant vectors.
fn assemble(fem: &crate::fem::FemMatrices, locked: Locked, slices: usize) -> LanczosOutput {
    let n = fem.dim();
    let r = locked.vecs.len() - 1;
    let mut lambdas = vec![0.0];
    let mut vectors = DMatrix::zeros(n, r + 1);
    vectors.set_column(0, &nalgebra::DVector::from_column_slice(&locked.vecs[0]));
    if r > 0 {
        let x = DMatrix::from_fn(n, r, |i, j| locked.vecs[j + 1][i]);
        let mx = DMatrix::from_fn(n, r, |i, j| locked.mvecs[j + 1][i]);
        let g = x.transpose() * &mx;
        let g = (&g + g.transpose()) * 0.5;
        let l = g.cholesky().expect("locked vectors are M-orthonormal").l();
        let xo = l
            .solve_lower_triangular(&x.transpose())
            .expect("non-singular Gram factor")
            .transpose();
        let sx = fem.stiffness.mul_dense(&xo);
        let a = xo.transpose() * sx;
        let a = (&a + a.transpose()) * 0.5;
        let eig = SymmetricEigen::new(a);
        let mut order: Vec<usize> = (0..r).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let y = DMatrix::from_fn(r, r, |i, j| eig.eigenvectors[(i, order[j])]);
        let p = xo * y;
        for (k, &i) in order.iter().enumerate() {
            lambdas.push(eig.eigenvalues[i]);
            vectors.set_column(k + 1, &p.column(k));
        }
    }
    LanczosOutput {
        lambdas,
        vectors,
        slices,
    }
}
