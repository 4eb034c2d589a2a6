//! Cross-method metrics, mode significance, short-time ADC and summaries.

use std::f64::consts::PI;

use num_complex::Complex64;
use thiserror::Error;

use crate::mesh::{Mesh, MeshError};
use crate::mf::{mf_signal, MfModel, SignalError};
use crate::records::SignalRecord;
use crate::seq::{Gradient, Pgse};
use crate::units::b_to_internal;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("signal sweep is empty")]
    EmptySweep,
    #[error("signal sweeps differ: {0}")]
    MismatchedSweep(String),
    #[error("reference signals are all zero")]
    ZeroDenominator,
    #[error("the constant mode cannot be removed")]
    RemoveConstantMode,
    #[error("model needs at least two modes")]
    TooFewModes,
    #[error("signals must be positive, got S0 = {s0}, Sb = {sb}")]
    NonPositiveSignal { s0: f64, sb: f64 },
    #[error("b-value must be positive, got {0}")]
    InvalidBValue(f64),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

/// E = Σ|S − S_ref|² / Σ|S_ref|² and its square root.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalDifference {
    pub e: f64,
    pub rms: f64,
    pub count: usize,
}

impl SignalDifference {
    pub fn percent(&self) -> f64 {
        100.0 * self.e
    }

    pub fn rms_percent(&self) -> f64 {
        100.0 * self.rms
    }
}

pub fn signal_difference(
    signals: &[Complex64],
    reference: &[Complex64],
) -> Result<SignalDifference, AnalysisError> {
    if signals.is_empty() {
        return Err(AnalysisError::EmptySweep);
    }
    if signals.len() != reference.len() {
        return Err(AnalysisError::MismatchedSweep(format!(
            "{} signals against {} reference signals",
            signals.len(),
            reference.len()
        )));
    }
    let num: f64 = signals
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).norm_sqr())
        .sum();
    let den: f64 = reference.iter().map(|b| b.norm_sqr()).sum();
    if den == 0.0 {
        return Err(AnalysisError::ZeroDenominator);
    }
    let e = num / den;
    Ok(SignalDifference {
        e,
        rms: e.sqrt(),
        count: signals.len(),
    })
}

/// E between two record sweeps; sequences, directions and b-values must
/// match pairwise.
pub fn record_difference(
    records: &[SignalRecord],
    reference: &[SignalRecord],
) -> Result<SignalDifference, AnalysisError> {
    if records.len() != reference.len() {
        return Err(AnalysisError::MismatchedSweep(format!(
            "{} records against {} reference records",
            records.len(),
            reference.len()
        )));
    }
    for (i, (a, b)) in records.iter().zip(reference).enumerate() {
        let same_dir = a
            .gradient
            .direction()
            .iter()
            .zip(b.gradient.direction())
            .all(|(x, y)| (x - y).abs() <= 1e-9);
        let same_b = (a.bvalue - b.bvalue).abs() <= 1e-9 * b.bvalue.max(1.0);
        if a.sequence != b.sequence || !same_dir || !same_b {
            return Err(AnalysisError::MismatchedSweep(format!("row {i} differs")));
        }
    }
    let s: Vec<Complex64> = records.iter().map(|r| r.signal).collect();
    let r: Vec<Complex64> = reference.iter().map(|r| r.signal).collect();
    signal_difference(&s, &r)
}

/// E^{RM,i} for i = 1..N_eig−1 (0-based; mode 0 is never removed) over the
/// given gradients, relative to the full model.
pub fn remove_one_significance(
    model: &MfModel,
    gradients: &[Gradient],
    seq: &Pgse,
) -> Result<Vec<f64>, AnalysisError> {
    if model.neig() < 2 {
        return Err(AnalysisError::TooFewModes);
    }
    if gradients.is_empty() {
        return Err(AnalysisError::EmptySweep);
    }
    let full: Vec<Complex64> = gradients.iter().map(|g| mf_signal(model, g, seq).signal).collect();
    let modes: Vec<usize> = (1..model.neig()).collect();
    use rayon::prelude::*;
    modes
        .par_iter()
        .map(|&i| {
            let keep: Vec<usize> = (0..model.neig()).filter(|&k| k != i).collect();
            let sub = model.restricted(&keep)?;
            let s: Vec<Complex64> = gradients.iter().map(|g| mf_signal(&sub, g, seq).signal).collect();
            Ok(signal_difference(&s, &full)?.e)
        })
        .collect()
}

/// Removes mode `i`; mode 0 is refused.
pub fn remove_mode(model: &MfModel, i: usize) -> Result<MfModel, AnalysisError> {
    if i == 0 {
        return Err(AnalysisError::RemoveConstantMode);
    }
    let keep: Vec<usize> = (0..model.neig()).filter(|&k| k != i).collect();
    Ok(model.restricted(&keep)?)
}

/// Flags modes whose E^{RM,i} exceeds `threshold` (a fraction).
pub fn significant_modes(e_rm: &[f64], threshold: f64) -> Vec<bool> {
    e_rm.iter().map(|&e| e > threshold).collect()
}

/// Direction colour of a first-row moment triplet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rgb {
    pub rgb: [f64; 3],
    /// The triplet was zero; `rgb` is (0, 0, 0).
    pub undirected: bool,
}

/// `[|a_x|, |a_y|, |a_z|] / ‖a‖`.
pub fn rgb_direction(a: [f64; 3]) -> Rgb {
    let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    if n == 0.0 {
        return Rgb {
            rgb: [0.0; 3],
            undirected: true,
        };
    }
    Rgb {
        rgb: a.map(|v| v.abs() / n),
        undirected: false,
    }
}

/// Finite-pulse factor C_{δ,Δ} (ms^{1/2}).
pub fn c_delta(seq: &Pgse) -> f64 {
    let (d, dd) = (seq.delta(), seq.big_delta());
    let p = |x: f64| x.powf(3.5);
    4.0 / 35.0 * (p(dd + d) + p(dd - d) - 2.0 * (p(d) + p(dd))) / (d * d * (dd - d / 3.0))
}

/// Short-time ADC: D₀[1 − 4√D₀/(3√π) · C_{δ,Δ} · A_u / |Ω|].
pub fn sta_adc(mesh: &Mesh, d0: f64, seq: &Pgse, u: [f64; 3]) -> Result<f64, AnalysisError> {
    let area = mesh.directional_area(u)?;
    Ok(sta_from_ratio(d0, seq, area / mesh.volume()))
}

/// STA for a given directional surface-to-volume ratio (μm⁻¹).
pub fn sta_from_ratio(d0: f64, seq: &Pgse, area_over_volume: f64) -> f64 {
    d0 * (1.0 - 4.0 * d0.sqrt() / (3.0 * PI.sqrt()) * c_delta(seq) * area_over_volume)
}

/// −ln(S_b / S₀) / b with b in s/mm², result in μm²/ms.
pub fn adc_from_signals(s0: f64, sb: f64, b: f64) -> Result<f64, AnalysisError> {
    if !(s0 > 0.0 && sb > 0.0) {
        return Err(AnalysisError::NonPositiveSignal { s0, sb });
    }
    if !(b > 0.0) {
        return Err(AnalysisError::InvalidBValue(b));
    }
    Ok(-(sb / s0).ln() / b_to_internal(b))
}

/// Truncated Σ_n (a^i_{1n})² against the exact ⟨x_i²⟩ = ∫x_i²/|Ω|.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParsevalReport {
    pub truncated: [f64; 3],
    pub exact: [f64; 3],
}

impl ParsevalReport {
    pub fn gap(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| self.exact[i] - self.truncated[i])
    }
}

pub fn parseval_report(model: &MfModel, mesh: &Mesh) -> ParsevalReport {
    let m = mesh.second_moment([0.0; 3]);
    let v = mesh.volume();
    ParsevalReport {
        truncated: model.parseval_sums(),
        exact: [m[0][0] / v, m[1][1] / v, m[2][2] / v],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_signals_have_zero_difference() {
        let s = vec![Complex64::new(1.0, 0.2), Complex64::new(0.5, -0.1)];
        assert_eq!(signal_difference(&s, &s).unwrap().e, 0.0);
    }

    #[test]
    fn uniform_scaling_gives_epsilon_squared() {
        let r = vec![Complex64::new(1.0, 0.2), Complex64::new(0.5, -0.1)];
        let eps = 0.03;
        let s: Vec<Complex64> = r.iter().map(|z| z * (1.0 + eps)).collect();
        let d = signal_difference(&s, &r).unwrap();
        assert!((d.e - eps * eps).abs() < 1e-15);
    }

    #[test]
    fn empty_and_zero_reference() {
        assert!(matches!(signal_difference(&[], &[]), Err(AnalysisError::EmptySweep)));
        let z = [Complex64::new(0.0, 0.0)];
        assert!(matches!(
            signal_difference(&z, &z),
            Err(AnalysisError::ZeroDenominator)
        ));
    }

    #[test]
    fn rgb_cases() {
        assert_eq!(rgb_direction([1.0, 0.0, 0.0]).rgb, [1.0, 0.0, 0.0]);
        let r = rgb_direction([1.0, -1.0, 0.0]).rgb;
        assert!((r[0] - 0.5f64.sqrt()).abs() < 1e-15 && (r[1] - 0.5f64.sqrt()).abs() < 1e-15);
        assert!(rgb_direction([0.0; 3]).undirected);
    }

    #[test]
    fn adc_inversion() {
        let d0 = 2.0;
        let b = 1000.0;
        let sb = (-d0 * b_to_internal(b)).exp();
        assert!((adc_from_signals(1.0, sb, b).unwrap() - d0).abs() < 1e-14);
        assert_eq!(adc_from_signals(1.0, 1.0, b).unwrap(), 0.0);
        assert!(adc_from_signals(0.0, 1.0, b).is_err());
    }

    #[test]
    fn c_delta_narrow_pulse_limit() {
        let big = 40.0;
        let s = Pgse::new(big * 1e-4, big).unwrap();
        assert!((c_delta(&s) / big.sqrt() - 1.0).abs() < 1e-3);
    }
}
