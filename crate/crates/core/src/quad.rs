//! Globally adaptive Gauss-Kronrod (7/15) quadrature on finite intervals.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub value: f64,
    pub error: f64,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        QuadOptions {
            abs_tol: 1e-14,
            rel_tol: 1e-12,
            max_intervals: 20_000,
        }
    }
}

struct Piece {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Piece {
    fn eq(&self, o: &Self) -> bool {
        self.error == o.error
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Piece {
    fn cmp(&self, o: &Self) -> Ordering {
        self.error.total_cmp(&o.error)
    }
}

fn kronrod(f: &mut impl FnMut(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = fc * WGK[7];
    let mut g = fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        k += WGK[j] * s;
        if j % 2 == 1 {
            g += WG[j / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Integrates `f` over `[a, b]`, bisecting the interval with the largest
/// error estimate until the total estimate meets the tolerance.
pub fn integrate(mut f: impl FnMut(f64) -> f64, a: f64, b: f64, opts: QuadOptions) -> Quadrature {
    integrate_breaks(&mut f, &[a, b], opts)
}

/// Like [`integrate`] with forced breakpoints (e.g. discontinuities of `f`).
/// `points` must be sorted.
pub fn integrate_breaks(
    mut f: impl FnMut(f64) -> f64,
    points: &[f64],
    opts: QuadOptions,
) -> Quadrature {
    let mut heap = BinaryHeap::new();
    let mut evaluations = 0;
    for w in points.windows(2) {
        if w[1] > w[0] {
            let (value, error) = kronrod(&mut f, w[0], w[1]);
            evaluations += 15;
            heap.push(Piece {
                a: w[0],
                b: w[1],
                value,
                error,
            });
        }
    }
    loop {
        let total: f64 = heap.iter().map(|p| p.value).sum();
        let err: f64 = heap.iter().map(|p| p.error).sum();
        let done = err <= opts.abs_tol.max(opts.rel_tol * total.abs());
        if done || heap.len() >= opts.max_intervals || heap.is_empty() {
            return Quadrature {
                value: total,
                error: err,
                evaluations,
            };
        }
        let worst = heap.pop().unwrap();
        let m = 0.5 * (worst.a + worst.b);
        if !(m > worst.a && m < worst.b) {
            heap.push(worst);
            let total: f64 = heap.iter().map(|p| p.value).sum();
            return Quadrature {
                value: total,
                error: err,
                evaluations,
            };
        }
        for (a, b) in [(worst.a, m), (m, worst.b)] {
            let (value, error) = kronrod(&mut f, a, b);
            evaluations += 15;
            heap.push(Piece { a, b, value, error });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let q = integrate(|x| x.powi(5) - 3.0 * x * x, -1.0, 2.0, QuadOptions::default());
        assert!((q.value - (64.0 - 1.0) / 6.0 + 9.0).abs() < 1e-13);
    }

    #[test]
    fn smooth_integrand() {
        let q = integrate(f64::exp, 0.0, 3.0, QuadOptions::default());
        assert!((q.value - (3f64.exp() - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn step_with_breakpoint() {
        let step = |x: f64| if x < 1.0 { 1.0 } else { -2.0 };
        let q = integrate_breaks(step, &[0.0, 1.0, 3.0], QuadOptions::default());
        assert!((q.value - (1.0 - 4.0)).abs() < 1e-14);
    }

    #[test]
    fn sqrt_singularity_converges() {
        let q = integrate(f64::sqrt, 0.0, 1.0, QuadOptions::default());
        assert!((q.value - 2.0 / 3.0).abs() < 1e-11);
    }
}
