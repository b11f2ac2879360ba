use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use num_complex::Complex64;

use nrgrape::propagator::expm;
use nrgrape::spin::{
    build_controls, build_drift, build_state, hamiltonian_superoperator, spin_operator, Axis, Channel, Isotope,
    SpinSystem, StateSpec,
};

fn hcf() -> SpinSystem {
    SpinSystem::new(vec![Isotope::H1, Isotope::C13, Isotope::F19], 9.4)
        .unwrap()
        .with_coupling(0, 1, 140.0)
        .unwrap()
        .with_coupling(1, 2, -160.0)
        .unwrap()
}

fn singlet_pair() -> SpinSystem {
    SpinSystem::new(vec![Isotope::C13, Isotope::C13], 14.1)
        .unwrap()
        .with_shifts_ppm(&[0.0, 0.25])
        .unwrap()
        .with_coupling(0, 1, 60.0)
        .unwrap()
}

fn is_hermitian(a: &Array2<Complex64>, tol: f64) -> bool {
    a.indexed_iter().all(|((i, j), z)| (z - a[[j, i]].conj()).norm() <= tol)
}

/// `−iL` as a real matrix; `None` if it has an imaginary part.
fn real_generator(l: &Array2<Complex64>) -> Option<DMatrix<f64>> {
    let g = l.mapv(|z| z * Complex64::new(0.0, -1.0));
    g.iter().all(|z| z.im == 0.0).then(|| DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| g[[i, j]].re))
}

fn apply(l: &Array2<Complex64>, v: &Array1<Complex64>) -> Array1<Complex64> {
    l.dot(v)
}

#[test]
fn dimensions_follow_four_to_the_n() {
    let sys = hcf();
    assert_eq!((sys.hilbert_dim(), sys.liouville_dim()), (8, 64));
    assert_eq!(build_drift(&sys).dim(), (64, 64));
    assert_eq!(build_drift(&singlet_pair()).dim(), (16, 16));
}

#[test]
fn superoperators_are_hermitian_with_imaginary_generator_spectra() {
    let sys = hcf();
    let channels: Vec<_> = ["x", "y"]
        .iter()
        .flat_map(|a| (0..3).map(move |s| (s, *a)))
        .map(|(s, a)| Channel::new(format!("{s}{a}"), vec![s], if a == "x" { Axis::X } else { Axis::Y }))
        .collect();
    let mut ops = build_controls(&sys, &channels).unwrap();
    ops.push(build_drift(&sys));
    for l in &ops {
        assert!(is_hermitian(l, 1e-9));
        let g = real_generator(l).expect("real generator in the product basis");
        let scale = g.abs().max().max(1.0);
        for z in g.complex_eigenvalues().iter() {
            assert!(z.re.abs() < 1e-9 * scale, "{z}");
        }
    }
}

#[test]
fn superoperator_is_linear_in_the_hamiltonian() {
    let n = 2;
    let a = spin_operator(n, 0, Axis::X);
    let b = spin_operator(n, 1, Axis::Z).dot(&spin_operator(n, 0, Axis::Y));
    let (x, y) = (Complex64::new(1.7, 0.0), Complex64::new(-0.3, 0.0));
    let lhs = hamiltonian_superoperator(n, &(&a * x + &b * y));
    let rhs = hamiltonian_superoperator(n, &a) * x + hamiltonian_superoperator(n, &b) * y;
    assert!((lhs - rhs).iter().all(|z| z.norm() < 1e-12));
}

#[test]
fn unit_operator_is_in_the_kernel() {
    for sys in [hcf(), singlet_pair()] {
        let unit = build_state(&sys, &StateSpec::Unit).unwrap();
        let out = apply(&build_drift(&sys), unit.coefficients());
        assert!(out.iter().all(|z| z.norm() < 1e-9));
    }
}

#[test]
fn total_lz_commutes_with_isotropic_coupling() {
    let sys = SpinSystem::new(vec![Isotope::H1, Isotope::C13], 9.4).unwrap().with_coupling(0, 1, 80.0).unwrap();
    let lz = build_state(&sys, &StateSpec::Lz { spins: vec![0, 1] }).unwrap();
    assert!(apply(&build_drift(&sys), lz.coefficients()).iter().all(|z| z.norm() < 1e-9));
    // but a single-spin Lz does evolve
    let lz0 = build_state(&sys, &StateSpec::Lz { spins: vec![0] }).unwrap();
    assert!(apply(&build_drift(&sys), lz0.coefficients()).iter().any(|z| z.norm() > 1.0));
}

#[test]
fn evolution_preserves_the_state_norm() {
    let sys = singlet_pair();
    let l = build_drift(&sys) + &build_controls(&sys, &[Channel::new("Cx", vec![0, 1], Axis::X)]).unwrap()[0] * 300.0;
    let rho = build_state(&sys, &StateSpec::Lz { spins: vec![0, 1] }).unwrap();
    let p = expm(&l.mapv(|z| z * Complex64::new(0.0, -1e-3)).view()).unwrap();
    let mut v = rho.coefficients().clone();
    for _ in 0..50 {
        v = p.dot(&v);
    }
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-10);
}

#[test]
fn states_are_unit_norm_and_singlet_is_orthogonal_to_lz() {
    let sys = singlet_pair();
    let s = build_state(&sys, &StateSpec::Singlet { spins: vec![0, 1] }).unwrap();
    let lz = build_state(&sys, &StateSpec::Lz { spins: vec![0, 1] }).unwrap();
    assert!((s.inner(&s).re - 1.0).abs() < 1e-14);
    assert!(s.inner(&lz).norm() < 1e-14);
    assert!(build_state(&hcf(), &StateSpec::Singlet { spins: vec![0, 1, 2] }).is_err());
}

#[test]
fn isotopes_parse_and_offsets_scale_with_field() {
    assert_eq!("19F".parse::<Isotope>().unwrap(), Isotope::F19);
    assert!("2H".parse::<Isotope>().is_err());
    let a = SpinSystem::new(vec![Isotope::C13], 14.1).unwrap().with_shifts_ppm(&[1.0]).unwrap();
    let b = SpinSystem::new(vec![Isotope::C13], 7.05).unwrap().with_shifts_ppm(&[1.0]).unwrap();
    assert!((a.offsets_hz()[0] / b.offsets_hz()[0] - 2.0).abs() < 1e-12);
    // 13C at 14.1 T resonates near 151 MHz, so 1 ppm is about 151 Hz
    assert!((a.offsets_hz()[0].abs() - 151.0).abs() < 1.0);
}
