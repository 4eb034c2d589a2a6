//! Physical constants and unit conversions.
//!
//! Canonical internal units are μm (length), ms (time), μm²/ms
//! (diffusivity) and T/m (gradient amplitude). b-values cross the public
//! boundary in s/mm².

/// Gyromagnetic ratio of the water proton in rad s⁻¹ T⁻¹.
pub const GAMMA_SI: f64 = 2.67513e8;

/// Gyromagnetic ratio in rad ms⁻¹ μm⁻¹ (T/m)⁻¹, i.e. `γ g·x` is in rad/ms
/// when `g` is in T/m and `x` in μm.
pub const GAMMA: f64 = GAMMA_SI * 1e-3 * 1e-6;

/// One internal b unit (ms/μm²) expressed in s/mm².
pub const B_INTERNAL_IN_S_PER_MM2: f64 = 1e3;

/// 1 mm²/s expressed in μm²/ms.
pub const MM2_PER_S_IN_UM2_PER_MS: f64 = 1e3;

/// Converts a b-value in s/mm² to ms/μm².
pub fn b_to_internal(b_s_per_mm2: f64) -> f64 {
    b_s_per_mm2 / B_INTERNAL_IN_S_PER_MM2
}

/// Converts a b-value in ms/μm² to s/mm².
pub fn b_from_internal(b_internal: f64) -> f64 {
    b_internal * B_INTERNAL_IN_S_PER_MM2
}

/// Converts a diffusivity in mm²/s to μm²/ms.
pub fn diffusivity_from_mm2_per_s(d: f64) -> f64 {
    d * MM2_PER_S_IN_UM2_PER_MS
}

/// Length unit tag carried by a mesh. Only μm is used internally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum LengthUnit {
    #[default]
    Micrometre,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_internal_value() {
        assert!((GAMMA - 0.267513).abs() < 1e-15);
    }

    #[test]
    fn d0_conversion() {
        assert!((diffusivity_from_mm2_per_s(2e-3) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn b_roundtrip() {
        assert_eq!(b_from_internal(b_to_internal(1000.0)), 1000.0);
    }
}
