mod common;

use spectral_dmri::btpde::{BtpdeOptions, BtpdeSolver};
use spectral_dmri::btspec::{bt_eigendecomposition, magnetization_at_echo, support_region};
use spectral_dmri::eig::{solve_interval, EigOptions};
use spectral_dmri::fem::assemble_centered;
use spectral_dmri::mesh::generate_grid_mesh;
use spectral_dmri::mf::{mf_signal, MfModel};
use spectral_dmri::seq::{amplitude_for_b, Gradient, Pgse};
use spectral_dmri::units::GAMMA;
use spectral_dmri::Complex64;

use common::{setup, Setup, D0};

const X: [f64; 3] = [1.0, 0.0, 0.0];

fn slab() -> Setup {
    setup([10.0, 2.0, 2.0], [40, 4, 4], 1.0)
}

fn sorted(mut v: Vec<Complex64>) -> Vec<Complex64> {
    v.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    v
}

#[test]
fn spectrum_of_reversed_gradient_is_conjugate() {
    let s = slab();
    let g = [0.12, 0.03, -0.05];
    let a = bt_eigendecomposition(&s.model, g).unwrap();
    let b = bt_eigendecomposition(&s.model, g.map(|c| -c)).unwrap();
    let ca = sorted(a.mus.iter().map(|z| z.conj()).collect());
    let cb = sorted(b.mus.clone());
    for (x, y) in ca.iter().zip(&cb) {
        assert!((x - y).norm() <= 1e-10 * x.norm().max(1.0));
    }
    for j in 0..a.len() {
        let c = a.psi_coefficients(j).unwrap();
        let n: f64 = c.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() <= 1e-12);
    }
    assert!(a.mus.windows(2).all(|w| w[0].re < w[1].re || (w[0].re == w[1].re && w[0].im <= w[1].im)));
}

#[test]
fn eigenvalues_move_at_most_linearly_in_gradient() {
    let s = slab();
    let a = &s.model.moments[0];
    let bound = a.clone().symmetric_eigenvalues().amax();
    for amp in [1e-4, 5e-5] {
        let bt = bt_eigendecomposition(&s.model, [amp, 0.0, 0.0]).unwrap();
        let lambdas = sorted(s.model.lambdas.iter().map(|&l| Complex64::new(l, 0.0)).collect());
        let mut shift = 0.0f64;
        for mu in &bt.mus {
            let d = lambdas.iter().map(|l| (mu - l).norm()).fold(f64::INFINITY, f64::min);
            shift = shift.max(d);
        }
        assert!(shift <= GAMMA * amp * bound * (1.0 + 1e-6), "{shift}");
    }
}

#[test]
fn zero_gradient_cases() {
    let s = slab();
    let bt = bt_eigendecomposition(&s.model, [0.0; 3]).unwrap();
    assert_eq!(bt.significant(0.01), vec![0]);
    let a = bt.a_delta(7.0).unwrap();
    assert_eq!(a[(0, 0)], Complex64::new(1.0, 0.0));
    assert_eq!(a.iter().filter(|z| z.norm() != 0.0).count(), 1);
    let support = support_region(&bt, &s.eig, 0, 0.01).unwrap();
    assert_eq!(support.len(), s.mesh.n_nodes());
    let seq = Pgse::new(2.0, 5.0).unwrap();
    let field = magnetization_at_echo(&bt, &s.eig, &s.model, &seq).unwrap();
    assert!(field.iter().all(|z| (z - Complex64::new(1.0, 0.0)).norm() <= 1e-10));
}

#[test]
fn supports_are_never_empty_and_projections_reconstruct() {
    let s = slab();
    let bt = bt_eigendecomposition(&s.model, [0.2, 0.0, 0.0]).unwrap();
    for j in 0..bt.len() {
        assert!(!support_region(&bt, &s.eig, j, 0.01).unwrap().is_empty());
    }
    for k in 0..bt.len() {
        let c: Complex64 = (0..bt.len()).map(|j| bt.projection(j) * bt.psi_coefficients(j).unwrap()[k]).sum();
        let expect = if k == 0 { 1.0 } else { 0.0 };
        assert!((c - expect).norm() <= 1e-10);
    }
}

#[test]
fn more_modes_matter_at_higher_amplitude() {
    let s = slab();
    let count = |amp: f64| bt_eigendecomposition(&s.model, [amp, 0.0, 0.0]).unwrap().significant(0.01).len();
    let counts: Vec<usize> = [0.0, 0.075, 0.15, 0.3745].iter().map(|&a| count(a)).collect();
    assert!(counts.windows(2).all(|w| w[0] <= w[1]), "{counts:?}");
    assert!(counts[3] > counts[0]);
}

#[test]
fn a_delta_rows_thin_out_with_pulse_length() {
    let s = slab();
    let bt = bt_eigendecomposition(&s.model, [0.3745, 0.0, 0.0]).unwrap();
    let rows = |delta: f64| {
        let a = bt.a_delta(delta).unwrap();
        (0..a.nrows()).filter(|&j| a.row(j).iter().any(|z| z.norm() >= 1e-3)).count()
    };
    let r: Vec<usize> = [2.5, 5.0, 10.0, 25.0].iter().map(|&d| rows(d)).collect();
    assert!(r.windows(2).all(|w| w[0] >= w[1]), "{r:?}");
    assert!(r[3] < r[0]);
}

#[test]
fn first_pulse_coefficients_match_time_stepping() {
    let s = slab();
    let seq = Pgse::new(5.0, 10.0).unwrap();
    let g = Gradient::new(X, amplitude_for_b(&seq, 1000.0).unwrap()).unwrap();
    let bt = bt_eigendecomposition(&s.model, g.vector()).unwrap();
    let c = bt.laplace_coefficients(seq.delta()).unwrap();
    let solver = BtpdeSolver::new(&s.fem, 1.0);
    let ev = solver.evolve(&g, &seq, seq.delta(), &BtpdeOptions::with_tolerances(1e-8, 1e-6)).unwrap();
    let mxi = s.fem.mass.apply(&ev.magnetization);
    let scale = s.model.volume.sqrt();
    let p: Vec<Complex64> = (0..s.eig.neig())
        .map(|k| s.eig.vectors.column(k).iter().zip(&mxi).map(|(v, m)| m * *v).sum::<Complex64>() / scale)
        .collect();
    let num: f64 = c.iter().zip(&p).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
    let den: f64 = p.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    assert!(num <= 0.01 * den, "{}", num / den);
}

#[test]
fn echo_field_integrates_to_the_signal_and_matches_time_stepping() {
    let s = slab();
    let seq = Pgse::new(5.0, 10.0).unwrap();
    let g = Gradient::new(X, amplitude_for_b(&seq, 1000.0).unwrap()).unwrap();
    let bt = bt_eigendecomposition(&s.model, g.vector()).unwrap();
    let field = magnetization_at_echo(&bt, &s.eig, &s.model, &seq).unwrap();
    let ones = vec![Complex64::new(1.0, 0.0); field.len()];
    let mf = s.fem.mass.apply(&field);
    let integral: Complex64 = mf.iter().zip(&ones).map(|(a, b)| a * b).sum();
    let expect = mf_signal(&s.model, &g, &seq).signal;
    assert!((integral - expect).norm() <= 1e-10 * expect.norm());

    let solver = BtpdeSolver::new(&s.fem, 1.0);
    let ev = solver.evolve(&g, &seq, seq.echo_time(), &BtpdeOptions::with_tolerances(1e-8, 1e-6)).unwrap();
    let diff: Vec<Complex64> = field.iter().zip(&ev.magnetization).map(|(a, b)| a - b).collect();
    let l2 = |v: &[Complex64]| {
        let mv = s.fem.mass.apply(v);
        v.iter().zip(&mv).map(|(a, b)| (a.conj() * b).re).sum::<f64>().sqrt()
    };
    assert!(l2(&diff) <= 0.02 * l2(&ev.magnetization));
}

#[test]
fn strong_gradients_localize_the_slowest_mode() {
    // Two 4 μm cubes joined by a 2 μm square channel.
    let cells = [10, 4, 4];
    let mesh = generate_grid_mesh([10.0, 4.0, 4.0], cells, |[i, j, k]| {
        i < 4 || i >= 6 || ((1..3).contains(&j) && (1..3).contains(&k))
    })
    .unwrap();
    let fp = mesh.fingerprint();
    let fem = assemble_centered(&mesh, D0).unwrap();
    let (eig, _) = solve_interval(&fem, 0.8, fp, &EigOptions::default()).unwrap();
    let model = MfModel::build(&eig, &fem, 1.0, &fp).unwrap();
    let fraction = |amp: f64| {
        let bt = bt_eigendecomposition(&model, [amp, 0.0, 0.0]).unwrap();
        support_region(&bt, &eig, 0, 0.1).unwrap().len() as f64 / mesh.n_nodes() as f64
    };
    let (lo, hi) = (fraction(0.075), fraction(0.3745));
    assert!(hi < lo, "{lo} -> {hi}");
}
