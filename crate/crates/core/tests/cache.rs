use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nrgrape::cache::{cached_expm, matrix_digest, CacheConfig, ExpmCache, MatrixRef, Sha256, Sha512};
use nrgrape::grape::{ControlProblem, ControlSequence};
use nrgrape::propagator::expm_call_count;
use nrgrape::spin::{build_controls, build_drift, build_state, Axis, Channel, Isotope, SpinSystem, StateSpec};

fn problem(slices: usize) -> (ControlProblem, ControlSequence) {
    let sys = SpinSystem::new(vec![Isotope::H1, Isotope::C13, Isotope::F19], 9.4)
        .unwrap()
        .with_coupling(0, 1, 140.0)
        .unwrap()
        .with_coupling(1, 2, -160.0)
        .unwrap();
    let channels = [Channel::new("Hx", vec![0], Axis::X), Channel::new("Fy", vec![2], Axis::Y)];
    let scale = 2.0 * std::f64::consts::PI * 250.0;
    let controls = build_controls(&sys, &channels).unwrap().into_iter().map(|c| c * scale).collect();
    let p = ControlProblem::new(
        build_drift(&sys),
        controls,
        build_state(&sys, &StateSpec::Lz { spins: vec![0] }).unwrap(),
        build_state(&sys, &StateSpec::Lz { spins: vec![2] }).unwrap(),
        1e-3,
        slices,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let seq = ControlSequence::new(Array2::from_shape_fn((2, slices), |_| rng.random_range(-1.0..1.0))).unwrap();
    (p, seq)
}

fn store(dir: Option<&std::path::Path>) -> Arc<ExpmCache> {
    Arc::new(ExpmCache::new(CacheConfig { threshold: 1, verify: false, dir: dir.map(Into::into) }))
}

#[test]
fn repeated_evaluation_computes_no_exponentials() {
    let (p, seq) = problem(8);
    let p = p.with_cache(store(None));
    let first = p.fidelity(&seq).unwrap();
    let before = expm_call_count();
    let again = p.fidelity(&seq).unwrap();
    assert_eq!(expm_call_count(), before);
    assert_eq!(first.j.to_bits(), again.j.to_bits());
    assert_eq!(p.cache().stats().hits, 8);
}

#[test]
fn cached_and_uncached_agree_bitwise_at_every_order() {
    let (p, seq) = problem(6);
    let cached = p.clone().with_cache(store(None));
    for _ in 0..2 {
        let (a, b) = (p.fidelity_hessian(&seq).unwrap(), cached.fidelity_hessian(&seq).unwrap());
        assert_eq!(a.j.to_bits(), b.j.to_bits());
        assert_eq!(a.grad, b.grad);
        assert_eq!(a.hess, b.hess);
    }
}

#[test]
fn file_store_serves_a_second_instance() {
    let dir = tempfile::tempdir().unwrap();
    let (p, seq) = problem(5);
    let j = p.clone().with_cache(store(Some(dir.path()))).fidelity(&seq).unwrap().j;
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 5);

    let fresh = store(Some(dir.path()));
    let before = expm_call_count();
    let again = p.with_cache(fresh.clone()).fidelity(&seq).unwrap().j;
    assert_eq!(expm_call_count(), before);
    assert_eq!(j.to_bits(), again.to_bits());
    assert_eq!((fresh.stats().hits, fresh.stats().misses), (5, 0));
}

#[test]
fn verify_mode_and_alternative_digests() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = Array2::from_shape_fn((6, 6), |_| Complex64::new(rng.random_range(-1.0..1.0), 0.0));
    let plain = cached_expm(&ExpmCache::disabled(), &g.view(), 0.1).unwrap();
    for engine in [Arc::new(Sha256) as Arc<_>, Arc::new(Sha512) as Arc<_>] {
        let c = ExpmCache::with_engine(CacheConfig { threshold: 1, verify: true, dir: None }, engine);
        assert_eq!(cached_expm(&c, &g.view(), 0.1).unwrap(), plain);
        assert_eq!(cached_expm(&c, &g.view(), 0.1).unwrap(), plain);
        assert_eq!((c.stats().hits, c.stats().misses), (1, 1));
    }
    let a = matrix_digest(&Sha256, MatrixRef::Full(g.view()), "expm", &0.1f64.to_le_bytes());
    let b = matrix_digest(&Sha512, MatrixRef::Full(g.view()), "expm", &0.1f64.to_le_bytes());
    assert_ne!(a.hex().len(), b.hex().len());
}
