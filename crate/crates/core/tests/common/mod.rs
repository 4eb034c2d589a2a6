#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::DMatrix;
use spectral_dmri::eig::{solve_interval, EigOptions, LaplaceEig};
use spectral_dmri::fem::{assemble_centered, FemMatrices};
use spectral_dmri::mesh::{generate_box_mesh, Mesh};
use spectral_dmri::mf::MfModel;
use spectral_dmri::seq::Pgse;
use spectral_dmri::units::GAMMA;
use spectral_dmri::Complex64;

pub const D0: f64 = 2.0;

pub struct Setup {
    pub mesh: Mesh,
    pub fem: FemMatrices,
    pub eig: LaplaceEig,
    pub model: MfModel,
}

pub fn setup(extent: [f64; 3], cells: [usize; 3], ls_min: f64) -> Setup {
    let mesh = generate_box_mesh(extent, cells).unwrap();
    let fp = mesh.fingerprint();
    let fem = assemble_centered(&mesh, D0).unwrap();
    let (eig, _) = solve_interval(&fem, ls_min, fp, &EigOptions::default()).unwrap();
    let model = MfModel::build(&eig, &fem, 1.0, &fp).unwrap();
    Setup {
        mesh,
        fem,
        eig,
        model,
    }
}

pub type CMat = DMatrix<Complex64>;

/// Scaling-and-squaring with a plain Taylor series.
pub fn expm_taylor(a: &CMat) -> CMat {
    let n = a.nrows();
    let norm = a.iter().map(|z| z.norm()).sum::<f64>();
    let mut s = 0;
    while norm / 2f64.powi(s) > 0.25 {
        s += 1;
    }
    let b = a / Complex64::new(2f64.powi(s), 0.0);
    let mut term = CMat::identity(n, n);
    let mut sum = CMat::identity(n, n);
    for k in 1..30 {
        term = &term * &b / Complex64::new(k as f64, 0.0);
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

/// Neumann cosine modes of the interval [0, h] with centered coordinate,
/// in closed form.
pub struct Interval {
    pub h: f64,
    pub lambdas: Vec<f64>,
    pub moments: DMatrix<f64>,
}

impl Interval {
    pub fn new(h: f64, modes: usize) -> Interval {
        let lambdas = (0..modes).map(|k| D0 * (k as f64 * PI / h).powi(2)).collect();
        // ∫₀ʰ x cos(pπx/h) dx.
        let ix = |p: i64| {
            if p == 0 {
                h * h / 2.0
            } else {
                let odd = if p % 2 == 0 { 0.0 } else { -2.0 };
                h * h / (p as f64 * PI).powi(2) * odd
            }
        };
        let norm = |k: usize| if k == 0 { (1.0 / h).sqrt() } else { (2.0 / h).sqrt() };
        let moments = DMatrix::from_fn(modes, modes, |m, n| {
            let (mi, ni) = (m as i64, n as i64);
            let xint = 0.5 * (ix(mi - ni) + ix(mi + ni));
            let overlap = if m == n {
                if m == 0 {
                    h
                } else {
                    h / 2.0
                }
            } else {
                0.0
            };
            norm(m) * norm(n) * (xint - h / 2.0 * overlap)
        });
        Interval { h, lambdas, moments }
    }

    /// |S|/S₀ for a gradient of `amplitude` T/m along the interval.
    pub fn attenuation(&self, amplitude: f64, seq: &Pgse) -> f64 {
        let n = self.lambdas.len();
        let k = CMat::from_fn(n, n, |r, c| {
            let l = if r == c { self.lambdas[r] } else { 0.0 };
            Complex64::new(l, GAMMA * amplitude * self.moments[(r, c)])
        });
        let d = Complex64::new(-seq.delta(), 0.0);
        let e1 = expm_taylor(&(&k * d));
        let e2 = expm_taylor(&(k.map(|z| z.conj()) * d));
        let gap = seq.big_delta() - seq.delta();
        let mid = CMat::from_fn(n, n, |r, c| {
            if r == c {
                Complex64::new((-self.lambdas[r] * gap).exp(), 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        });
        (e1 * mid * e2)[(0, 0)].norm()
    }
}
