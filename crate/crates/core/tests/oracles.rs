//! Library kernels against independent brute-force implementations.

mod support;

use dsn3d_core::Rng;
use support::*;

#[test]
fn adjoint_identity() {
    let mut rng = Rng::new(100);
    let worst = (0..50).map(|_| adjoint_discrepancy(&mut rng)).fold(0.0, f64::max);
    assert!(worst <= 1e-10, "adjoint discrepancy {worst:e}");
}

#[test]
fn conv3d_matches_loops() {
    let mut rng = Rng::new(101);
    for case in 0..150 {
        let e = conv_oracle_error(&mut rng);
        assert!(e <= 1e-9, "case {case}: rel err {e:e}");
    }
}

#[test]
fn energy_matches_double_loop() {
    let mut rng = Rng::new(102);
    for case in 0..150 {
        let e = energy_oracle_error(&mut rng);
        assert!(e <= 1e-9, "case {case}: rel err {e:e}");
    }
}

#[test]
fn surface_distances_match_exhaustive_search() {
    let mut rng = Rng::new(103);
    for case in 0..150 {
        let e = surface_oracle_error(&mut rng);
        assert!(e <= 1e-9, "case {case}: rel err {e:e}");
    }
}

#[test]
fn mean_field_quality_on_small_slices() {
    let mut rng = Rng::new(104);
    let trials: Vec<_> = (0..100).map(|_| mean_field_trial(&mut rng)).collect();
    let no_worse = trials.iter().filter(|t| t.mean_field <= t.unary_argmax + 1e-12).count();
    let near = trials.iter().filter(|t| t.mean_field <= 1.05 * t.exact).count();
    assert!(trials.iter().all(|t| t.exact <= t.mean_field + 1e-12));
    assert!(no_worse >= 95, "{no_worse}/100 no worse than unary argmax");
    assert!(near >= 90, "{near}/100 within 5% of the optimum");
}
