//! Coverage and model quantities checked against an independent
//! double-exponential quadrature.

use approx::assert_relative_eq;
use proptest::prelude::*;
use pvcell::coverage::{coverage_closed, coverage_sigma, CoverageEvaluator, CoverageFn, CoverageSettings};
use pvcell::model::{c_constant, k_delta, NetworkParams};

/// `int_a^inf f(u) du` through `u = a + (1 - t) / t`.
fn oracle_tail(f: impl Fn(f64) -> f64, a: f64) -> f64 {
    quadrature::double_exponential::integrate(
        |t: f64| {
            if t <= 0.0 {
                return 0.0;
            }
            f(a + (1.0 - t) / t) / (t * t)
        },
        0.0,
        1.0,
        1e-13,
    )
    .integral
}

/// `K_delta(r)` as the full-line value `(pi / delta) / sin(pi / delta)` minus
/// the finite head `int_0^r`.
fn oracle_k_delta(r: f64, delta: f64) -> f64 {
    let full = std::f64::consts::PI / delta / (std::f64::consts::PI / delta).sin();
    let head = quadrature::double_exponential::integrate(|u: f64| 1.0 / (1.0 + u.powf(delta)), 0.0, r, 1e-14).integral;
    full - head
}

fn oracle_coverage(p: &NetworkParams, q: f64) -> f64 {
    let (kappa, delta, t, w) = (p.kappa(), p.delta(), p.threshold(), p.w());
    let noise = p.mu() * t * p.sigma2();
    quadrature::double_exponential::integrate(
        |v: f64| {
            let link = kappa + v.powf(delta);
            let exposure = oracle_tail(|u| w * t * link / (kappa + u.powf(delta) + t * link), v);
            q * (-noise * link / (1.0 + kappa) - q * exposure - v).exp()
        },
        0.0,
        40.0,
        1e-12,
    )
    .integral
}

#[test]
fn k_delta_against_oracle() {
    for &(r, delta) in &[(2.0, 3.0), (0.0, 2.0), (0.3, 1.25), (5.0, 4.0)] {
        let oracle = oracle_k_delta(r, delta);
        assert_relative_eq!(k_delta(r, delta).unwrap(), oracle, max_relative = 1e-9);
    }
}

#[test]
fn c_constant_against_oracle() {
    for &(t, delta, w) in &[(1.0, 2.0, 10.0), (0.5, 1.5, 2.0), (3.0, 3.0, 1.0)] {
        let y: f64 = f64::powf(t, 1.0 / delta);
        let oracle = y * w * oracle_k_delta(1.0 / y, delta);
        assert_relative_eq!(c_constant(t, delta, w).unwrap(), oracle, max_relative = 1e-9);
    }
}

#[test]
fn bounded_attenuation_against_oracle() {
    for &(kappa, sigma2) in &[(0.005, 0.0), (0.1, 0.0), (0.1, 0.05)] {
        let params = NetworkParams::builder().kappa(kappa).sigma2(sigma2).build().unwrap();
        let ev = CoverageEvaluator::new(params).unwrap();
        for &q in &[0.05, 0.4, 1.0] {
            let oracle = oracle_coverage(&params, q);
            assert_relative_eq!(ev.coverage(q).unwrap(), oracle, max_relative = 1e-7);
        }
    }
}

#[test]
fn full_double_integral_matches_closed_form() {
    let settings = CoverageSettings {
        kappa0_reduction: false,
        ..CoverageSettings::default()
    };
    let params = NetworkParams::builder().calibrate_constant(4.0).unwrap().build().unwrap();
    let ev = CoverageEvaluator::with_settings(params, settings).unwrap();
    for &q in &[0.01, 0.2, 0.7, 1.0] {
        assert!((ev.coverage(q).unwrap() - coverage_closed(q, 4.0)).abs() < 1e-8);
    }
}

#[test]
fn noise_form_matches_general_evaluator() {
    let params = NetworkParams::builder().sigma2(0.2).threshold(0.5).build().unwrap();
    let ev = CoverageEvaluator::new(params).unwrap();
    let c = params.c_constant().unwrap();
    for &q in &[0.1, 0.5, 0.9] {
        let direct = coverage_sigma(q, c, params.mu(), params.sigma2(), params.threshold(), params.delta()).unwrap();
        assert_relative_eq!(ev.coverage(q).unwrap(), direct, max_relative = 1e-8);
        assert_relative_eq!(direct, oracle_coverage(&params, q), max_relative = 1e-8);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn closed_form_is_increasing_and_success_decreasing(c in 0.1f64..20.0, q1 in 0.001f64..1.0, q2 in 0.001f64..1.0) {
        let (lo, hi) = if q1 < q2 { (q1, q2) } else { (q2, q1) };
        prop_assume!(hi - lo > 1e-9);
        prop_assert!(coverage_closed(lo, c) < coverage_closed(hi, c));
        prop_assert!(coverage_closed(lo, c) / lo > coverage_closed(hi, c) / hi);
        prop_assert!(coverage_closed(hi, c) <= hi);
    }

    #[test]
    fn coverage_bounded_by_busy_probability(kappa in 0.0f64..0.5, sigma2 in 0.0f64..0.5, q in 0.01f64..1.0) {
        let params = NetworkParams::builder().kappa(kappa).sigma2(sigma2).build().unwrap();
        let ev = CoverageEvaluator::new(params).unwrap();
        let v = ev.coverage(q).unwrap();
        prop_assert!(v >= 0.0 && v <= q);
        let u = ev.success_given_busy(q).unwrap();
        let u_half = ev.success_given_busy(q * 0.5).unwrap();
        prop_assert!(u <= u_half + 1e-12);
    }
}
