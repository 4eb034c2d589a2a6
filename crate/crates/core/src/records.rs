//! Signal records shared by the MF, MFGA and BTPDE engines.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::seq::{bvalue, Gradient, Pgse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Method {
    Mf,
    Mfga,
    Btpde,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::Mf => "MF",
            Method::Mfga => "MFGA",
            Method::Btpde => "BTPDE",
        }
    }

    pub fn from_tag(s: &str) -> Option<Method> {
        match s {
            "MF" => Some(Method::Mf),
            "MFGA" => Some(Method::Mfga),
            "BTPDE" => Some(Method::Btpde),
            _ => None,
        }
    }
}

/// Time-stepping details attached to BTPDE records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub atol: f64,
    pub rtol: f64,
    pub steps_taken: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalRecord {
    pub method: Method,
    pub sequence: Pgse,
    pub gradient: Gradient,
    /// s/mm².
    pub bvalue: f64,
    pub signal: Complex64,
    /// ρ|Ω|.
    pub s0: f64,
    pub neig: Option<usize>,
    pub solver: Option<SolverStats>,
}

impl SignalRecord {
    pub fn new(method: Method, sequence: Pgse, gradient: Gradient, signal: Complex64, s0: f64) -> Self {
        SignalRecord {
            method,
            sequence,
            gradient,
            bvalue: bvalue(&sequence, gradient.amplitude()),
            signal,
            s0,
            neig: None,
            solver: None,
        }
    }

    /// |S| / S₀.
    pub fn attenuation(&self) -> f64 {
        self.signal.norm() / self.s0
    }
}
