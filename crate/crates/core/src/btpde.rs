//! Reference solver for the semi-discrete Bloch-Torrey equation
//! `M ξ′ = −(S + iγ f(t) Σ g_i J^i) ξ`, `ξ(0) = ρ`.
//!
//! The operator is constant on each piece of the PGSE profile. Each piece
//! is integrated with the θ-method on a dyadic grid `h = T/2^k`; the local
//! error of a step is estimated by step doubling and the grid level moves
//! up or down accordingly. Factorizations of `M + θhA` are cached per level
//! while the piece lasts.

use std::collections::HashMap;
use std::sync::Arc;

use num_complex::Complex64;
use thiserror::Error;

use crate::fem::FemMatrices;
use crate::records::{Method, SignalRecord, SolverStats};
use crate::seq::{amplitude_for_b, Gradient, Pgse, SequenceError};
use crate::skyline::{factor_combination, FactorError, LdlFactor, Profile};
use crate::sparse::SparseSym;
use crate::units::{b_to_internal, GAMMA};

/// Steps shorter than this (ms) abort the solve.
pub const MIN_STEP: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum BtpdeError {
    #[error("invalid solver options: {0}")]
    InvalidOptions(String),
    #[error("step size underflow at t = {t} ms (h = {h:e} ms)")]
    StepUnderflow { t: f64, h: f64 },
    #[error("linear solve failed: {0}")]
    Factorization(#[from] FactorError),
    #[error("requested time {t} ms is outside [0, {echo}] ms")]
    TimeOutOfRange { t: f64, echo: f64 },
    #[error(transparent)]
    Sequence(#[from] SequenceError),
    #[error("signal is not positive, cannot take its logarithm")]
    NonPositiveSignal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BtpdeOptions {
    pub atol: f64,
    pub rtol: f64,
    /// Upper bound on the step (ms); `None` leaves it to error control.
    pub max_step: Option<f64>,
    /// Implicitness, in `[0.5, 1]`.
    pub theta: f64,
}

impl Default for BtpdeOptions {
    fn default() -> Self {
        BtpdeOptions {
            atol: 1e-4,
            rtol: 1e-2,
            max_step: None,
            theta: 0.5,
        }
    }
}

impl BtpdeOptions {
    pub fn high_accuracy() -> Self {
        BtpdeOptions {
            atol: 1e-6,
            rtol: 1e-4,
            ..Self::default()
        }
    }

    pub fn with_tolerances(atol: f64, rtol: f64) -> Self {
        BtpdeOptions {
            atol,
            rtol,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), BtpdeError> {
        if !(self.atol > 0.0 && self.rtol > 0.0) {
            return Err(BtpdeError::InvalidOptions("atol and rtol must be positive".into()));
        }
        if !(0.5..=1.0).contains(&self.theta) {
            return Err(BtpdeError::InvalidOptions("theta must lie in [0.5, 1]".into()));
        }
        if let Some(h) = self.max_step {
            if !(h > 0.0) {
                return Err(BtpdeError::InvalidOptions("max_step must be positive".into()));
            }
        }
        Ok(())
    }

    /// Convergence order of the θ-method.
    fn order(&self) -> i32 {
        if self.theta == 0.5 {
            2
        } else {
            1
        }
    }
}

/// Magnetization at a requested time plus step statistics.
#[derive(Debug, Clone)]
pub struct Evolution {
    pub time: f64,
    pub magnetization: Vec<Complex64>,
    pub steps_taken: usize,
    pub rejected: usize,
}

/// Bloch-Torrey integrator bound to one set of FEM matrices.
pub struct BtpdeSolver<'a> {
    fem: &'a FemMatrices,
    profile: Arc<Profile>,
    rho: f64,
}

impl<'a> BtpdeSolver<'a> {
    pub fn new(fem: &'a FemMatrices, rho: f64) -> Self {
        BtpdeSolver {
            fem,
            profile: Arc::new(Profile::for_matrix(&fem.mass)),
            rho,
        }
    }

    pub fn s0(&self) -> f64 {
        let ones = vec![1.0; self.fem.dim()];
        self.rho * self.fem.mass.bilinear(&ones, &ones)
    }

    /// 1ᵀ M ξ.
    pub fn integral(&self, xi: &[Complex64]) -> Complex64 {
        self.fem.mass.apply(xi).iter().sum()
    }

    /// Integrates from 0 to `t_end` ≤ TE.
    pub fn evolve(
        &self,
        g: &Gradient,
        seq: &Pgse,
        t_end: f64,
        opts: &BtpdeOptions,
    ) -> Result<Evolution, BtpdeError> {
        opts.validate()?;
        let echo = seq.echo_time();
        if !(0.0..=echo).contains(&t_end) {
            return Err(BtpdeError::TimeOutOfRange { t: t_end, echo });
        }
        let w = self.fem.moment_combination(g.vector());
        let mut xi = vec![Complex64::new(self.rho, 0.0); self.fem.dim()];
        let mut steps = 0;
        let mut rejected = 0;
        let bp = seq.breakpoints();
        for piece in 0..3 {
            let (a, b) = (bp[piece], bp[piece + 1].min(t_end));
            if b <= a {
                continue;
            }
            let f = [1.0, 0.0, -1.0][piece];
            let stats = self.integrate_piece(&mut xi, &w, f, a, b, opts)?;
            steps += stats.0;
            rejected += stats.1;
        }
        Ok(Evolution {
            time: t_end,
            magnetization: xi,
            steps_taken: steps,
            rejected,
        })
    }

    fn apply_operator(&self, w: &SparseSym, coef: f64, x: &[Complex64]) -> Vec<Complex64> {
        let mut out = self.fem.stiffness.apply(x);
        if coef != 0.0 {
            let wx = w.apply(x);
            let c = Complex64::new(0.0, coef);
            for (o, v) in out.iter_mut().zip(&wx) {
                *o += c * v;
            }
        }
        out
    }

    fn factor(
        &self,
        cache: &mut HashMap<u32, LdlFactor<Complex64>>,
        w: &SparseSym,
        coef: f64,
        theta: f64,
        h: f64,
        level: u32,
    ) -> Result<(), BtpdeError> {
        if !cache.contains_key(&level) {
            if cache.len() >= 8 {
                let far = *cache.keys().max_by_key(|&&k| k.abs_diff(level)).unwrap();
                cache.remove(&far);
            }
            let one = Complex64::new(1.0, 0.0);
            let th = theta * h;
            let mut terms = vec![
                (&self.fem.mass, one),
                (&self.fem.stiffness, Complex64::new(th, 0.0)),
            ];
            if coef != 0.0 {
                terms.push((w, Complex64::new(0.0, th * coef)));
            }
            cache.insert(level, factor_combination(&self.profile, &terms)?);
        }
        Ok(())
    }

    fn theta_step(
        &self,
        fac: &LdlFactor<Complex64>,
        w: &SparseSym,
        coef: f64,
        theta: f64,
        h: f64,
        x: &[Complex64],
    ) -> Vec<Complex64> {
        let mut rhs = self.fem.mass.apply(x);
        if theta < 1.0 {
            let ax = self.apply_operator(w, coef, x);
            let s = (1.0 - theta) * h;
            for (r, v) in rhs.iter_mut().zip(&ax) {
                *r -= v * s;
            }
        }
        fac.solve(&rhs)
    }

    /// Returns (accepted steps, rejected steps).
    fn integrate_piece(
        &self,
        xi: &mut Vec<Complex64>,
        w: &SparseSym,
        f: f64,
        t0: f64,
        t1: f64,
        opts: &BtpdeOptions,
    ) -> Result<(usize, usize), BtpdeError> {
        let span = t1 - t0;
        let coef = GAMMA * f;
        let err_scale = 1.0 / ((1u32 << opts.order()) - 1) as f64;
        let h_at = |k: u32| span / (1u64 << k) as f64;
        let mut min_level = 0;
        if let Some(hmax) = opts.max_step {
            while h_at(min_level) > hmax {
                min_level += 1;
            }
        }
        let mut level = min_level.max(2);
        let mut pos: u64 = 0;
        let mut cache = HashMap::new();
        let (mut accepted, mut rejected) = (0, 0);
        while pos < (1u64 << level) {
            let h = h_at(level);
            if h < MIN_STEP {
                return Err(BtpdeError::StepUnderflow {
                    t: t0 + pos as f64 * h,
                    h,
                });
            }
            self.factor(&mut cache, w, coef, opts.theta, h, level)?;
            self.factor(&mut cache, w, coef, opts.theta, h / 2.0, level + 1)?;
            let full = self.theta_step(&cache[&level], w, coef, opts.theta, h, xi);
            let fine = &cache[&(level + 1)];
            let half = self.theta_step(fine, w, coef, opts.theta, h / 2.0, xi);
            let half = self.theta_step(fine, w, coef, opts.theta, h / 2.0, &half);
            let err = half
                .iter()
                .zip(&full)
                .map(|(a, b)| (a - b).norm() * err_scale / (opts.atol + opts.rtol * a.norm()))
                .fold(0.0, f64::max);
            if err <= 1.0 {
                *xi = half;
                accepted += 2;
                pos += 1;
                if err < 0.1 && level > min_level && pos % 2 == 0 {
                    level -= 1;
                    pos /= 2;
                }
            } else {
                rejected += 1;
                level += 1;
                pos *= 2;
            }
        }
        Ok((accepted, rejected))
    }
}

/// S^BTPDE = 1ᵀ M ξ(TE).
pub fn btpde_signal(
    fem: &FemMatrices,
    g: &Gradient,
    seq: &Pgse,
    opts: &BtpdeOptions,
    rho: f64,
) -> Result<SignalRecord, BtpdeError> {
    let solver = BtpdeSolver::new(fem, rho);
    let ev = solver.evolve(g, seq, seq.echo_time(), opts)?;
    let mut rec = SignalRecord::new(
        Method::Btpde,
        *seq,
        *g,
        solver.integral(&ev.magnetization),
        solver.s0(),
    );
    rec.solver = Some(SolverStats {
        atol: opts.atol,
        rtol: opts.rtol,
        steps_taken: ev.steps_taken,
    });
    Ok(rec)
}

/// Two-point ADC from |S| at b = 0 and b = 1 s/mm², in μm²/ms.
pub fn btpde_adc(
    fem: &FemMatrices,
    direction: [f64; 3],
    seq: &Pgse,
    opts: &BtpdeOptions,
    rho: f64,
) -> Result<f64, BtpdeError> {
    let b1 = 1.0;
    let g0 = Gradient::new(direction, 0.0)?;
    let g1 = Gradient::new(direction, amplitude_for_b(seq, b1)?)?;
    let s0 = btpde_signal(fem, &g0, seq, opts, rho)?.signal.norm();
    let s1 = btpde_signal(fem, &g1, seq, opts, rho)?.signal.norm();
    if !(s0 > 0.0 && s1 > 0.0) {
        return Err(BtpdeError::NonPositiveSignal);
    }
    Ok(-(s1 / s0).ln() / b_to_internal(b1))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::assemble_centered;
    use crate::mesh::generate_box_mesh;

    #[test]
    fn zero_gradient_conserves_mass() {
        let mesh = generate_box_mesh([4.0, 2.0, 2.0], [4, 2, 2]).unwrap();
        let fem = assemble_centered(&mesh, 2.0).unwrap();
        let g = Gradient::new([1.0, 0.0, 0.0], 0.0).unwrap();
        let seq = Pgse::new(2.0, 5.0).unwrap();
        let r = btpde_signal(&fem, &g, &seq, &BtpdeOptions::default(), 1.0).unwrap();
        assert!((r.signal.re - r.s0).abs() < 1e-10 * r.s0);
        assert!(r.signal.im.abs() < 1e-10 * r.s0);
    }

    #[test]
    fn invalid_options_rejected() {
        let mesh = generate_box_mesh([1.0; 3], [1; 3]).unwrap();
        let fem = assemble_centered(&mesh, 2.0).unwrap();
        let g = Gradient::new([1.0, 0.0, 0.0], 0.1).unwrap();
        let seq = Pgse::new(1.0, 2.0).unwrap();
        let bad = BtpdeOptions {
            theta: 0.2,
            ..BtpdeOptions::default()
        };
        assert!(btpde_signal(&fem, &g, &seq, &bad, 1.0).is_err());
        let solver = BtpdeSolver::new(&fem, 1.0);
        assert!(matches!(
            solver.evolve(&g, &seq, 5.0, &BtpdeOptions::default()),
            Err(BtpdeError::TimeOutOfRange { .. })
        ));
    }
}
