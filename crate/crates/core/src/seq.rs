//! PGSE sequences, gradients, b-values and direction sets.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quad::{integrate_breaks, QuadOptions};
use crate::units::{b_from_internal, b_to_internal, GAMMA};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SequenceError {
    #[error("PGSE timing requires 0 < delta <= Delta, got delta = {delta} ms, Delta = {big_delta} ms")]
    InvalidTiming { delta: f64, big_delta: f64 },
    #[error("gradient amplitude must be non-negative and finite, got {0}")]
    InvalidAmplitude(f64),
    #[error("b-value must be non-negative and finite, got {0}")]
    InvalidBValue(f64),
    #[error("direction {0:?} is not a unit vector")]
    NonUnitDirection([f64; 3]),
    #[error("direction count must be at least 1")]
    NoDirections,
}

/// Pulsed gradient spin echo: `f = +1` on `[0, δ]`, `0` on `(δ, Δ]`,
/// `−1` on `(Δ, δ + Δ]`. Times in ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pgse {
    delta: f64,
    big_delta: f64,
}

impl Pgse {
    pub fn new(delta: f64, big_delta: f64) -> Result<Pgse, SequenceError> {
        if !(delta > 0.0 && delta <= big_delta && big_delta.is_finite()) {
            return Err(SequenceError::InvalidTiming { delta, big_delta });
        }
        Ok(Pgse { delta, big_delta })
    }

    /// δ.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Δ.
    pub fn big_delta(&self) -> f64 {
        self.big_delta
    }

    pub fn echo_time(&self) -> f64 {
        self.delta + self.big_delta
    }

    /// Boundaries of the three constant pieces of `f`.
    pub fn breakpoints(&self) -> [f64; 4] {
        [0.0, self.delta, self.big_delta, self.echo_time()]
    }

    /// f(t).
    pub fn profile(&self, t: f64) -> f64 {
        if (0.0..=self.delta).contains(&t) {
            1.0
        } else if t > self.big_delta && t <= self.echo_time() {
            -1.0
        } else {
            0.0
        }
    }

    /// F(t) = ∫₀ᵗ f.
    pub fn integrated(&self, t: f64) -> f64 {
        if t <= 0.0 {
            0.0
        } else if t <= self.delta {
            t
        } else if t <= self.big_delta {
            self.delta
        } else if t <= self.echo_time() {
            self.echo_time() - t
        } else {
            0.0
        }
    }

    /// ∫₀^{TE} F² = δ²(Δ − δ/3), in ms³.
    pub fn time_factor(&self) -> f64 {
        self.delta * self.delta * (self.big_delta - self.delta / 3.0)
    }
}

/// Gradient `g = amplitude · direction`, amplitude in T/m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gradient {
    direction: [f64; 3],
    amplitude: f64,
}

impl Gradient {
    pub fn new(direction: [f64; 3], amplitude: f64) -> Result<Gradient, SequenceError> {
        let n = (direction[0].powi(2) + direction[1].powi(2) + direction[2].powi(2)).sqrt();
        if !((n - 1.0).abs() <= 1e-12) {
            return Err(SequenceError::NonUnitDirection(direction));
        }
        if !(amplitude >= 0.0 && amplitude.is_finite()) {
            return Err(SequenceError::InvalidAmplitude(amplitude));
        }
        Ok(Gradient {
            direction,
            amplitude,
        })
    }

    pub fn direction(&self) -> [f64; 3] {
        self.direction
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    /// g in T/m.
    pub fn vector(&self) -> [f64; 3] {
        self.direction.map(|u| u * self.amplitude)
    }

    pub fn negated(&self) -> Gradient {
        Gradient {
            direction: self.direction.map(|u| -u),
            amplitude: self.amplitude,
        }
    }
}

/// b = γ²|g|²δ²(Δ − δ/3), in s/mm².
pub fn bvalue(seq: &Pgse, amplitude: f64) -> f64 {
    b_from_internal((GAMMA * amplitude).powi(2) * seq.time_factor())
}

/// b-value from adaptive quadrature of γ²|g|²∫₀^{TE} F(t)² dt, in s/mm².
pub fn bvalue_quadrature(seq: &Pgse, amplitude: f64) -> f64 {
    let opts = QuadOptions {
        abs_tol: 0.0,
        rel_tol: 1e-13,
        ..QuadOptions::default()
    };
    let q = integrate_breaks(|t| seq.integrated(t).powi(2), &seq.breakpoints(), opts);
    b_from_internal((GAMMA * amplitude).powi(2) * q.value)
}

/// Inverse of [`bvalue`]: amplitude in T/m.
pub fn amplitude_for_b(seq: &Pgse, b: f64) -> Result<f64, SequenceError> {
    if !(b >= 0.0 && b.is_finite()) {
        return Err(SequenceError::InvalidBValue(b));
    }
    Ok((b_to_internal(b) / seq.time_factor()).sqrt() / GAMMA)
}

/// Fibonacci-lattice unit vectors. The full-sphere set uses heights
/// `z_i = 1 − (2i+1)/n`; the hemisphere set keeps the upper half of the
/// `2n`-point lattice, i.e. `z_i = 1 − (i + ½)/n`. For `n = 1` the
/// full-sphere point is (1, 0, 0).
pub fn directions(n: usize, hemisphere: bool) -> Result<Vec<[f64; 3]>, SequenceError> {
    if n == 0 {
        return Err(SequenceError::NoDirections);
    }
    let golden = PI * (3.0 - 5f64.sqrt());
    Ok((0..n)
        .map(|i| {
            let z = if hemisphere {
                1.0 - (i as f64 + 0.5) / n as f64
            } else {
                1.0 - (2 * i + 1) as f64 / n as f64
            };
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            let v = [r * phi.cos(), r * phi.sin(), z];
            let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            v.map(|c| c / len)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timing_validation() {
        assert!(Pgse::new(0.0, 1.0).is_err());
        assert!(Pgse::new(2.0, 1.0).is_err());
        assert!(Pgse::new(1.0, 1.0).is_ok());
    }

    #[test]
    fn rephasing() {
        let s = Pgse::new(3.0, 7.0).unwrap();
        assert_eq!(s.integrated(s.echo_time()), 0.0);
    }

    #[test]
    fn zero_amplitude() {
        let s = Pgse::new(10.6, 13.0).unwrap();
        assert_eq!(bvalue(&s, 0.0), 0.0);
        assert_eq!(amplitude_for_b(&s, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn single_direction_convention() {
        assert_eq!(directions(1, false).unwrap(), vec![[1.0, 0.0, 0.0]]);
        assert!(directions(0, false).is_err());
    }

    #[test]
    fn hemisphere_points_are_upper() {
        for v in directions(50, true).unwrap() {
            assert!(v[2] > 0.0);
        }
    }

    #[test]
    fn gradient_checks() {
        assert!(Gradient::new([1.0, 1.0, 0.0], 0.1).is_err());
        assert!(Gradient::new([1.0, 0.0, 0.0], -0.1).is_err());
        let g = Gradient::new([0.0, 1.0, 0.0], 0.2).unwrap();
        assert_eq!(g.vector(), [0.0, 0.2, 0.0]);
    }
}
