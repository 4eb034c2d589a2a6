use proptest::prelude::*;
use spectral_dmri::quad::{integrate_breaks, QuadOptions};
use spectral_dmri::seq::{amplitude_for_b, bvalue, bvalue_quadrature, directions, Pgse};

fn angle(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0).acos()
}

#[test]
fn seq1_closed_form_matches_quadrature() {
    let seq = Pgse::new(10.6, 13.0).unwrap();
    let amp = amplitude_for_b(&seq, 1000.0).unwrap();
    assert!((bvalue(&seq, amp) - 1000.0).abs() < 1e-9);
    assert!((bvalue_quadrature(&seq, amp) - 1000.0).abs() <= 1e-10 * 1000.0);
    for b in [1000.0, 4000.0] {
        let a = amplitude_for_b(&seq, b).unwrap();
        assert!((bvalue(&seq, a) - b).abs() <= 1e-12 * b);
    }
    assert_eq!(amplitude_for_b(&seq, 0.0).unwrap(), 0.0);
    assert_eq!(bvalue(&seq, 0.0), 0.0);
}

#[test]
fn long_pulse_table_value() {
    let seq = Pgse::new(25.0, 25.0).unwrap();
    let b = bvalue(&seq, 0.3745);
    assert!((b - 104167.0).abs() <= 0.005 * 104167.0, "{b}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn closed_form_b_matches_quadrature(d in 0.05f64..30.0, extra in 0.0f64..60.0, g in 0.001f64..1.0) {
        let seq = Pgse::new(d, d + extra).unwrap();
        let c = bvalue(&seq, g);
        let q = bvalue_quadrature(&seq, g);
        prop_assert!((c - q).abs() <= 1e-9 * c);
        prop_assert!((bvalue(&seq, 2.0 * g) - 4.0 * c).abs() <= 1e-14 * 4.0 * c);
    }

    #[test]
    fn profile_rephases(d in 0.05f64..30.0, extra in 0.0f64..60.0) {
        let seq = Pgse::new(d, d + extra).unwrap();
        let opts = QuadOptions { abs_tol: 1e-13, rel_tol: 0.0, ..QuadOptions::default() };
        let total = integrate_breaks(|t| seq.profile(t), &seq.breakpoints(), opts).value;
        prop_assert!(total.abs() <= 1e-12 * seq.echo_time());
        prop_assert_eq!(seq.integrated(seq.echo_time()), 0.0);
    }
}

#[test]
fn direction_sets() {
    let one = directions(1, false).unwrap();
    assert_eq!(one.len(), 1);
    let d151 = directions(151, false).unwrap();
    let mut min_angle = f64::INFINITY;
    for (i, a) in d151.iter().enumerate() {
        let n = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
        assert!((n - 1.0).abs() <= 1e-15);
        for b in &d151[i + 1..] {
            min_angle = min_angle.min(angle(*a, *b));
        }
    }
    assert!(min_angle > 0.0);

    let n = 900;
    let d = directions(n, false).unwrap();
    let ideal = (4.0 * std::f64::consts::PI / n as f64).sqrt();
    for (i, a) in d.iter().enumerate() {
        let nn = d
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, b)| angle(*a, *b))
            .fold(f64::INFINITY, f64::min);
        assert!(nn >= ideal / 2.0 && nn <= 2.0 * ideal, "point {i}: {nn} vs {ideal}");
    }
    assert!(directions(0, true).is_err());
}
