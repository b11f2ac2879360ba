use std::sync::Arc;

use ndarray::{Array1, Array2};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nrgrape::cache::{CacheConfig, ExpmCache};
use nrgrape::grape::{ControlProblem, ControlSequence};
use nrgrape::penalty::{diff_matrix, per_channel, PenaltySpec};
use nrgrape::propagator::{generator_derivatives, expm};
use nrgrape::spin::{
    build_controls, build_drift, build_state, operator_to_state, spin_operator, Axis, Channel, Isotope,
    SpinSystem, StateSpec, StateVector,
};

fn two_spin(rng: &mut ChaCha8Rng) -> SpinSystem {
    SpinSystem::new(vec![Isotope::H1, Isotope::C13], 9.4)
        .unwrap()
        .with_offsets_hz(&[rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)])
        .unwrap()
        .with_coupling(0, 1, rng.random_range(-3.0..3.0))
        .unwrap()
}

/// Two spins, two channels, O(1) rotation angles per slice.
fn random_problem(seed: u64, slices: usize) -> (ControlProblem, ControlSequence) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sys = two_spin(&mut rng);
    let channels = [Channel::new("Hx", vec![0], Axis::X), Channel::new("Cy", vec![1], Axis::Y)];
    let problem = ControlProblem::new(
        build_drift(&sys),
        build_controls(&sys, &channels).unwrap(),
        build_state(&sys, &StateSpec::Lz { spins: vec![0] }).unwrap(),
        build_state(&sys, &StateSpec::Lz { spins: vec![1] }).unwrap(),
        0.1,
        slices,
    )
    .unwrap();
    let amps = Array2::from_shape_fn((2, slices), |_| rng.random_range(-5.0..5.0));
    (problem, ControlSequence::new(amps).unwrap())
}

fn shifted(seq: &ControlSequence, idx: usize, h: f64) -> ControlSequence {
    let mut flat = seq.flatten();
    flat[idx] += h;
    ControlSequence::from_flat(seq.channels(), seq.slices(), &flat.view()).unwrap()
}

fn fd_gradient(problem: &ControlProblem, seq: &ControlSequence, h: f64) -> Array1<f64> {
    Array1::from_iter((0..problem.num_controls()).map(|i| {
        let p = problem.fidelity(&shifted(seq, i, h)).unwrap().j;
        let m = problem.fidelity(&shifted(seq, i, -h)).unwrap().j;
        (p - m) / (2.0 * h)
    }))
}

fn rel_err(a: f64, b: f64, scale: f64) -> f64 {
    (a - b).abs() / b.abs().max(scale)
}

#[test]
fn gradient_matches_finite_differences() {
    for seed in 0..5 {
        let (problem, seq) = random_problem(seed, 4);
        assert!(problem.is_real());
        let g = problem.fidelity_gradient(&seq).unwrap().grad.unwrap();
        let fd = fd_gradient(&problem, &seq, 1e-5);
        let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (a, b) in g.iter().zip(fd.iter()) {
            assert!(rel_err(*a, *b, 1e-3 * scale) < 1e-6, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn hessian_matches_finite_differences_of_gradient() {
    for seed in 10..13 {
        let (problem, seq) = random_problem(seed, 3);
        let r = problem.fidelity_hessian(&seq).unwrap();
        let hess = r.hess.unwrap();
        assert!(r.asymmetry.unwrap() < 1e-9);
        assert_eq!(hess, hess.t());
        let scale = hess.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let h = 1e-5;
        for i in 0..problem.num_controls() {
            let gp = problem.fidelity_gradient(&shifted(&seq, i, h)).unwrap().grad.unwrap();
            let gm = problem.fidelity_gradient(&shifted(&seq, i, -h)).unwrap().grad.unwrap();
            for j in 0..problem.num_controls() {
                let fd = (gp[j] - gm[j]) / (2.0 * h);
                assert!(rel_err(hess[[i, j]], fd, 1e-3 * scale) < 1e-5, "({i},{j}): {} vs {fd}", hess[[i, j]]);
            }
        }
    }
}

#[test]
fn hessian_path_gradient_agrees_with_gradient_path() {
    let (problem, seq) = random_problem(3, 5);
    let a = problem.fidelity_gradient(&seq).unwrap();
    let b = problem.fidelity_hessian(&seq).unwrap();
    assert_eq!(a.j, b.j);
    for (x, y) in a.grad.unwrap().iter().zip(b.grad.unwrap().iter()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn complex_arithmetic_path() {
    let (real, seq) = random_problem(4, 3);
    // A target with an imaginary part forces complex propagation.
    let twist = real.target_state().coefficients().mapv(|z| z * Complex64::from_polar(1.0, 0.3));
    let problem = ControlProblem::new(
        real.drift().clone(),
        real.controls().to_vec(),
        real.initial_state().clone(),
        StateVector::new(twist).unwrap(),
        real.dt(),
        real.slices(),
    )
    .unwrap();
    assert!(!problem.is_real());
    let r = problem.fidelity_hessian(&seq).unwrap();
    let fd = fd_gradient(&problem, &seq, 1e-5);
    for (a, b) in r.grad.as_ref().unwrap().iter().zip(fd.iter()) {
        assert!((a - b).abs() < 1e-7 * (1.0 + b.abs()));
    }
    // Re(e^{iθ}⟨δ|ρ⟩) with θ = 0.3 relates the two objectives.
    let base = real.fidelity(&seq).unwrap().j;
    assert!((r.j - 0.3f64.cos() * base).abs() < 0.3f64.sin() + 1e-12);
    assert!(r.asymmetry.unwrap() < 1e-9);
}

#[test]
fn zero_controls_and_drift_give_unit_fidelity() {
    let sys = SpinSystem::new(vec![Isotope::H1, Isotope::H1], 9.4).unwrap();
    let channels = [Channel::new("x", vec![0, 1], Axis::X)];
    let lz = build_state(&sys, &StateSpec::Lz { spins: vec![0, 1] }).unwrap();
    let problem =
        ControlProblem::new(build_drift(&sys), build_controls(&sys, &channels).unwrap(), lz.clone(), lz, 1e-3, 7)
            .unwrap();
    let r = problem.fidelity(&ControlSequence::zeros(1, 7)).unwrap();
    assert!((r.j - 1.0).abs() < 1e-14);
    assert_eq!(r.trajectory_evals, 1);
}

#[test]
fn single_spin_rotation() {
    let sys = SpinSystem::new(vec![Isotope::H1], 9.4).unwrap();
    let lz = build_state(&sys, &StateSpec::Lz { spins: vec![0] }).unwrap();
    let ly = operator_to_state(1, &spin_operator(1, 0, Axis::Y)).unwrap();
    let n = 10;
    let dt = 1e-3;
    let problem = ControlProblem::new(
        build_drift(&sys),
        build_controls(&sys, &[Channel::new("x", vec![0], Axis::X)]).unwrap(),
        lz,
        ly,
        dt,
        n,
    )
    .unwrap();
    let c = std::f64::consts::FRAC_PI_2 / (n as f64 * dt);
    let r = problem.fidelity(&ControlSequence::new(Array2::from_elem((1, n), c)).unwrap()).unwrap();
    // exp(-iθLx) Lz exp(iθLx) = Lz cosθ − Ly sinθ
    assert!((r.j + 1.0).abs() < 1e-12, "{}", r.j);
}

#[test]
fn unit_target_is_unreachable() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let sys = two_spin(&mut rng);
    let problem = ControlProblem::new(
        build_drift(&sys),
        build_controls(&sys, &[Channel::new("x", vec![0], Axis::X)]).unwrap(),
        build_state(&sys, &StateSpec::Lz { spins: vec![0, 1] }).unwrap(),
        build_state(&sys, &StateSpec::Unit).unwrap(),
        0.1,
        3,
    )
    .unwrap();
    let r = problem.fidelity_gradient(&ControlSequence::zeros(1, 3)).unwrap();
    assert_eq!(r.j, 0.0);
    assert!(r.grad.unwrap().iter().all(|&g| g == 0.0));
}

#[test]
fn null_controls_have_zero_gradient() {
    let (p, seq) = random_problem(6, 4);
    let zero = vec![Array2::<Complex64>::zeros((16, 16)); 2];
    let problem = ControlProblem::new(
        p.drift().clone(),
        zero,
        p.initial_state().clone(),
        p.target_state().clone(),
        p.dt(),
        4,
    )
    .unwrap();
    let r = problem.fidelity_hessian(&seq).unwrap();
    assert!(r.grad.unwrap().iter().all(|&g| g == 0.0));
    assert!(r.hess.unwrap().iter().all(|&h| h == 0.0));
}

#[test]
fn one_slice_one_channel_gradient_is_direct_contraction() {
    let (p, seq) = random_problem(7, 1);
    let problem = ControlProblem::new(
        p.drift().clone(),
        vec![p.controls()[0].clone()],
        p.initial_state().clone(),
        p.target_state().clone(),
        p.dt(),
        1,
    )
    .unwrap();
    let c = seq.amplitudes()[[0, 0]];
    let seq = ControlSequence::new(Array2::from_elem((1, 1), c)).unwrap();
    let g = problem.fidelity_gradient(&seq).unwrap().grad.unwrap()[0];

    let minus_i_dt = Complex64::new(0.0, -problem.dt());
    let h = problem.drift() + &problem.controls()[0].mapv(|x| x * c);
    let (_, dp, _) = generator_derivatives(
        &h.mapv(|x| x * minus_i_dt).view(),
        &[problem.controls()[0].mapv(|x| x * minus_i_dt)],
        1,
        &[],
    )
    .unwrap();
    let direct = nrgrape::linalg::inner(
        &problem.target_state().coefficients().view(),
        &dp[0].dot(problem.initial_state().coefficients()).view(),
    )
    .re;
    assert!((g - direct).abs() < 1e-13);
}

#[test]
fn single_slice_hessian_is_one_block() {
    let (problem, seq) = random_problem(8, 1);
    let r = problem.fidelity_hessian(&seq).unwrap();
    assert_eq!(r.hess.unwrap().dim(), (2, 2));
    assert_eq!(r.asymmetry.unwrap(), 0.0);
}

#[test]
fn refining_the_grid_keeps_the_fidelity() {
    let (problem, seq) = random_problem(9, 4);
    let fine = ControlProblem::new(
        problem.drift().clone(),
        problem.controls().to_vec(),
        problem.initial_state().clone(),
        problem.target_state().clone(),
        problem.dt() / 2.0,
        8,
    )
    .unwrap();
    let doubled = Array2::from_shape_fn((2, 8), |(k, n)| seq.amplitudes()[[k, n / 2]]);
    let a = problem.fidelity(&seq).unwrap().j;
    let b = fine.fidelity(&ControlSequence::new(doubled).unwrap()).unwrap().j;
    assert!((a - b).abs() < 1e-10, "{a} vs {b}");
}

#[test]
fn unit_ensemble_is_the_single_system() {
    let (problem, seq) = random_problem(11, 3);
    let a = problem.fidelity_hessian(&seq).unwrap();
    let b = problem.clone().with_ensemble(vec![1.0]).unwrap().fidelity_hessian(&seq).unwrap();
    assert_eq!(a.j, b.j);
    assert_eq!(a.grad, b.grad);
    assert_eq!(a.hess, b.hess);
}

#[test]
fn ensemble_derivatives_match_finite_differences() {
    let (problem, seq) = random_problem(12, 3);
    let problem = problem
        .with_ensemble(vec![0.8, 1.0, 1.2])
        .unwrap()
        .with_penalties(vec![PenaltySpec::norm_square(1e-3), PenaltySpec::spillout(0.1, 3.0, -3.0)])
        .unwrap();
    let r = problem.fidelity_hessian(&seq).unwrap();
    assert_eq!(r.trajectory_evals, 6);
    let fd = fd_gradient(&problem, &seq, 1e-5);
    for (a, b) in r.grad.as_ref().unwrap().iter().zip(fd.iter()) {
        assert!((a - b).abs() < 1e-7 * (1.0 + b.abs()), "{a} vs {b}");
    }
    let hess = r.hess.unwrap();
    for i in 0..problem.num_controls() {
        let gp = problem.fidelity_gradient(&shifted(&seq, i, 1e-5)).unwrap().grad.unwrap();
        let gm = problem.fidelity_gradient(&shifted(&seq, i, -1e-5)).unwrap().grad.unwrap();
        for j in 0..problem.num_controls() {
            let fd = (gp[j] - gm[j]) / 2e-5;
            assert!((hess[[i, j]] - fd).abs() < 1e-5 * (1.0 + fd.abs()));
        }
    }
}

#[test]
fn penalties_enter_with_a_minus_sign() {
    let (problem, seq) = random_problem(13, 3);
    let d = per_channel(&diff_matrix(3, 1, 0.1).unwrap(), 2);
    let pen = vec![PenaltySpec::derivative_norm_square(1e-4, d)];
    let with = problem.clone().with_penalties(pen).unwrap();
    let a = problem.fidelity_gradient(&seq).unwrap();
    let b = with.fidelity_gradient(&seq).unwrap();
    assert!(b.penalty > 0.0);
    assert_eq!(b.j, a.j - b.penalty);
    assert_eq!(b.fidelity, a.fidelity);
}

#[test]
fn trajectory_accounting() {
    let (problem, seq) = random_problem(14, 3);
    let problem = problem.with_ensemble(vec![0.9, 1.1]).unwrap();
    assert_eq!(problem.fidelity(&seq).unwrap().trajectory_evals, 2);
    assert_eq!(problem.fidelity_gradient(&seq).unwrap().trajectory_evals, 4);
    assert_eq!(problem.fidelity_hessian(&seq).unwrap().trajectory_evals, 4);
}

#[test]
fn worker_count_does_not_change_results() {
    let (problem, seq) = random_problem(15, 6);
    let serial = problem.fidelity_hessian(&seq).unwrap();
    for workers in [2, 3] {
        let par = problem.clone().with_workers(workers).unwrap().fidelity_hessian(&seq).unwrap();
        assert_eq!(serial.j, par.j);
        assert_eq!(serial.grad, par.grad);
        assert_eq!(serial.hess, par.hess);
    }
}

#[test]
fn cache_is_transparent() {
    let (problem, seq) = random_problem(16, 5);
    let cache = Arc::new(ExpmCache::new(CacheConfig { threshold: 1, ..CacheConfig::default() }));
    let cached = problem.clone().with_cache(cache.clone());
    let a = problem.fidelity_hessian(&seq).unwrap();
    let b = cached.fidelity_hessian(&seq).unwrap();
    assert_eq!(a.j.to_bits(), b.j.to_bits());
    assert_eq!(a.grad, b.grad);
    assert_eq!(cache.stats().misses, 5);
    let c = cached.fidelity(&seq).unwrap();
    assert_eq!(c.j.to_bits(), a.j.to_bits());
    assert_eq!(cache.stats().hits, 5);
}

#[test]
fn mismatched_inputs_are_rejected() {
    let (problem, _) = random_problem(17, 3);
    assert!(problem.fidelity(&ControlSequence::zeros(2, 4)).is_err());
    assert!(problem.fidelity(&ControlSequence::zeros(3, 3)).is_err());
    assert!(ControlSequence::new(Array2::from_elem((1, 1), f64::NAN)).is_err());
    assert!(problem.clone().with_ensemble(vec![]).is_err());
    assert!(problem.clone().with_ensemble(vec![-1.0]).is_err());
    let bad = vec![PenaltySpec::NormSquare { weights: vec![1.0; 5] }];
    assert!(problem.clone().with_penalties(bad).is_err());
    let small = Array2::<Complex64>::zeros((4, 4));
    assert!(ControlProblem::new(
        small,
        problem.controls().to_vec(),
        problem.initial_state().clone(),
        problem.target_state().clone(),
        0.1,
        3
    )
    .is_err());
}

#[test]
fn flattening_is_slice_major() {
    let a = Array2::from_shape_fn((2, 3), |(k, n)| (10 * n + k) as f64);
    let seq = ControlSequence::new(a).unwrap();
    assert_eq!(seq.flatten().to_vec(), vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]);
    let back = ControlSequence::from_flat(2, 3, &seq.flatten().view()).unwrap();
    assert_eq!(back, seq);
}

#[test]
fn propagators_are_unitary_without_relaxation() {
    let (problem, seq) = random_problem(18, 1);
    let minus_i = Complex64::new(0.0, -problem.dt());
    let mut h = problem.drift().clone();
    for (k, c) in problem.controls().iter().enumerate() {
        h.scaled_add(Complex64::new(seq.amplitudes()[[k, 0]], 0.0), c);
    }
    let p = expm(&h.mapv(|x| x * minus_i).view()).unwrap();
    let defect = nrgrape::linalg::adjoint(&p.view()).dot(&p) - Array2::<Complex64>::eye(16);
    assert!(nrgrape::linalg::frobenius(&defect.view()) < 1e-10);
}
