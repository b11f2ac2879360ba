use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nrgrape::propagator::{
    expm, first_derivative_dense, generator_derivatives, second_derivative_dense, slice_propagator_with_derivs,
    upper_pairs,
};

fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> Array2<Complex64> {
    Array2::from_shape_fn((n, n), |_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}

fn hermitian(rng: &mut ChaCha8Rng, n: usize) -> Array2<Complex64> {
    let a = random_matrix(rng, n);
    (&a + &a.t().mapv(|z| z.conj())) * Complex64::new(0.5, 0.0)
}

fn frob(a: &Array2<Complex64>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn rel(a: &Array2<Complex64>, b: &Array2<Complex64>) -> f64 {
    frob(&(a - b)) / frob(b).max(1e-300)
}

fn prop(h: &Array2<Complex64>, dt: f64) -> Array2<Complex64> {
    expm(&h.mapv(|x| x * Complex64::new(0.0, -dt)).view()).unwrap()
}

fn plus(h: &Array2<Complex64>, e: &Array2<Complex64>, s: f64) -> Array2<Complex64> {
    h + &e.mapv(|x| x * s)
}

#[test]
fn two_by_two_blocks_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (dt, eps) = (0.7, 1e-5);
    for _ in 0..10 {
        let (h, hk) = (random_matrix(&mut rng, 4), random_matrix(&mut rng, 4));
        let (p, dp) = first_derivative_dense(&h, &hk, dt).unwrap();
        assert!(rel(&p, &prop(&h, dt)) < 1e-12);
        let fd = (prop(&plus(&h, &hk, eps), dt) - prop(&plus(&h, &hk, -eps), dt)) / Complex64::new(2.0 * eps, 0.0);
        assert!(rel(&dp, &fd) < 1e-6, "{}", rel(&dp, &fd));
    }
}

#[test]
fn three_by_three_blocks_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (dt, eps) = (0.5, 1e-5);
    for case in 0..10 {
        let h = random_matrix(&mut rng, 4);
        let hi = random_matrix(&mut rng, 4);
        let hj = if case % 3 == 0 { hi.clone() } else { random_matrix(&mut rng, 4) };
        let blocks = second_derivative_dense(&h, &hi, &hj, dt).unwrap();
        let p = prop(&h, dt);
        for d in &blocks.diagonal {
            assert!(rel(d, &p) < 1e-12);
        }
        let (_, di) = first_derivative_dense(&h, &hi, dt).unwrap();
        let (_, dj) = first_derivative_dense(&h, &hj, dt).unwrap();
        assert!(rel(&blocks.upper, &di) < 1e-12);
        assert!(rel(&blocks.lower, &dj) < 1e-12);

        // ∂²P/∂ci∂cj is the corner plus the corner with the roles swapped
        let swapped = second_derivative_dense(&h, &hj, &hi, dt).unwrap();
        let analytic = &blocks.corner + &swapped.corner;
        let step = Complex64::new(2.0 * eps, 0.0);
        let fd = (first_derivative_dense(&plus(&h, &hj, eps), &hi, dt).unwrap().1
            - first_derivative_dense(&plus(&h, &hj, -eps), &hi, dt).unwrap().1)
            / step;
        assert!(rel(&analytic, &fd) < 1e-6, "{}", rel(&analytic, &fd));
    }
}

#[test]
fn structured_blocks_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (dt, eps) = (0.3, 1e-5);
    let h = hermitian(&mut rng, 4);
    let controls: Vec<_> = (0..3).map(|_| hermitian(&mut rng, 4)).collect();
    let pairs = upper_pairs(3);
    let sp = slice_propagator_with_derivs(&h.view(), &controls, dt, 2, &pairs).unwrap();
    let step = Complex64::new(2.0 * eps, 0.0);
    for (i, j) in pairs {
        let dp = |s: f64| {
            slice_propagator_with_derivs(&plus(&h, &controls[j], s).view(), &controls, dt, 1, &[]).unwrap().dp[i].clone()
        };
        let fd = (dp(eps) - dp(-eps)) / step;
        let d2 = sp.d2p(i, j).unwrap();
        assert!(rel(d2, &fd) < 1e-6, "({i},{j}): {}", rel(d2, &fd));
        assert_eq!(sp.d2p(j, i), Some(d2));
    }
}

#[test]
fn real_generators_stay_real() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let g = Array2::from_shape_fn((6, 6), |_| rng.random_range(-1.0..1.0));
    let e = vec![Array2::from_shape_fn((6, 6), |_| rng.random_range(-1.0..1.0))];
    let (p, dp, _) = generator_derivatives(&g.view(), &e, 1, &[]).unwrap();
    let pc = expm(&g.mapv(|x| Complex64::new(x, 0.0)).view()).unwrap();
    assert!(p.iter().zip(pc.iter()).all(|(a, b)| (a - b.re).abs() < 1e-12 && b.im.abs() < 1e-12));
    assert_eq!(dp.len(), 1);
}

#[test]
fn unitary_for_hermitian_hamiltonians() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    for scale in [1e-3, 1.0, 50.0] {
        let h = hermitian(&mut rng, 8).mapv(|z| z * scale);
        let p = prop(&h, 1.0);
        let pp = p.t().mapv(|z| z.conj()).dot(&p);
        let id = Array2::from_diag_elem(8, Complex64::new(1.0, 0.0));
        assert!(rel(&pp, &id) < 1e-11, "scale {scale}");
    }
}

#[test]
fn semigroup_property() {
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let h = random_matrix(&mut rng, 5);
    let whole = prop(&h, 1.0);
    let half = prop(&h, 0.5);
    assert!(rel(&half.dot(&half), &whole) < 1e-12);
}
