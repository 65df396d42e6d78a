//! Coast-down identification against an analytic coast.

use ebike_core::ident::{
    fit_coastdown, fit_coastdown_with, linearize_beta, simulate_coastdown, validate_constant_speed, CoastdownTrace,
    FitOptions,
};
use ebike_core::params::{kmh_to_mps, CoastdownCoeffs};
use ebike_core::Error;
use proptest::prelude::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const MASS: f64 = 95.0;
const RADIUS: f64 = 0.33;

/// Closed-form solution of `M dv/dt = -(A + B v + C v^2)` while `4AC > B^2`.
fn analytic_speed(c: &CoastdownCoeffs, v0: f64, t: f64) -> f64 {
    let (a, b, q) = (c.constant_n, c.linear_n_per_mps, c.quadratic_n_per_mps2);
    let k = (4.0 * a * q - b * b).sqrt() / (2.0 * q);
    let shift = b / (2.0 * q);
    let arg = ((v0 + shift) / k).atan() - q * k * t / MASS;
    (k * arg.tan() - shift).max(0.0)
}

fn analytic_trace(c: &CoastdownCoeffs, v0: f64, dt: f64, duration: f64) -> CoastdownTrace {
    let n = (duration / dt).round() as usize;
    let samples: Vec<_> = (0..=n)
        .map(|i| {
            let t = i as f64 * dt;
            (t, analytic_speed(c, v0, t) / RADIUS)
        })
        .collect();
    CoastdownTrace::from_samples(&samples).unwrap()
}

fn worst_rel_error(fit: &CoastdownCoeffs, truth: &CoastdownCoeffs) -> f64 {
    [
        fit.constant_n / truth.constant_n,
        fit.linear_n_per_mps / truth.linear_n_per_mps,
        fit.quadratic_n_per_mps2 / truth.quadratic_n_per_mps2,
    ]
    .into_iter()
    .map(|r| (r - 1.0).abs())
    .fold(0.0, f64::max)
}

#[test]
fn plant_coast_matches_the_closed_form() {
    let truth = CoastdownCoeffs::new(4.0, 0.3, 0.4);
    let v0 = kmh_to_mps(30.0);
    let trace = simulate_coastdown(&truth, MASS, RADIUS, v0, 0.1, 40.0).unwrap();
    for (&t, &w) in trace.times().iter().zip(trace.wheel_speeds()) {
        assert!((w * RADIUS - analytic_speed(&truth, v0, t)).abs() < 1e-8, "t = {t}");
    }
}

#[test]
fn noiseless_fit_recovers_coefficients() {
    let truth = CoastdownCoeffs::new(4.0, 0.3, 0.4);
    let fit = fit_coastdown(&analytic_trace(&truth, kmh_to_mps(35.0), 0.1, 60.0), MASS, RADIUS).unwrap();
    assert!(worst_rel_error(&fit.coeffs, &truth) < 1e-3, "{:?}", fit.coeffs);
}

#[test]
fn refinement_tightens_noisy_fits() {
    let truth = CoastdownCoeffs::new(4.0, 0.3, 0.4);
    let trace = analytic_trace(&truth, kmh_to_mps(35.0), 0.01, 80.0);
    let normal = Normal::new(0.0, 0.05).unwrap();
    let plain = FitOptions {
        refine: false,
        ..FitOptions::default()
    };
    let (mut refined_worst, mut plain_worst) = (0.0f64, 0.0f64);
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noisy = trace.with_noise(|_| normal.sample(&mut rng)).unwrap();
        let refined = fit_coastdown(&noisy, MASS, RADIUS).unwrap();
        refined_worst = refined_worst.max(worst_rel_error(&refined.coeffs, &truth));
        let derivative = fit_coastdown_with(&noisy, MASS, RADIUS, &plain).unwrap();
        plain_worst = plain_worst.max(worst_rel_error(&derivative.coeffs, &truth));
    }
    assert!(refined_worst < 0.05, "{refined_worst}");
    assert!(refined_worst < plain_worst, "{refined_worst} vs {plain_worst}");
}

#[test]
fn constant_speed_is_not_identifiable() {
    let samples: Vec<_> = (0..200).map(|i| (i as f64 * 0.1, 15.0)).collect();
    let trace = CoastdownTrace::from_samples(&samples).unwrap();
    assert_eq!(fit_coastdown(&trace, MASS, RADIUS), Err(Error::NotIdentifiable));
}

#[test]
fn constant_speed_check_balances_at_the_cruise_torque() {
    let c = CoastdownCoeffs::new(4.0, 0.3, 0.4);
    let v = 5.0;
    let torque = (c.constant_n + c.linear_n_per_mps * v + c.quadratic_n_per_mps2 * v * v) * RADIUS;
    assert!(validate_constant_speed(&c, v, torque, RADIUS).abs() < 1e-12);
}

proptest! {
    #[test]
    fn beta_is_the_resistance_slope(
        a in 0.0f64..20.0,
        b in 0.0f64..2.0,
        c in 0.0f64..1.0,
        v in 0.0f64..15.0,
    ) {
        let coeffs = CoastdownCoeffs::new(a, b, c);
        let h = 1e-4;
        let fd = (-coeffs.eval(v + 2.0 * h) + 4.0 * coeffs.eval(v + h) - 3.0 * coeffs.eval(v)) / (2.0 * h);
        prop_assert!((linearize_beta(&coeffs, v) - fd).abs() < 1e-6 * (1.0 + fd.abs()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn fits_are_scale_free_in_mass(scale in 0.5f64..2.0) {
        let truth = CoastdownCoeffs::new(4.0 * scale, 0.3 * scale, 0.4 * scale);
        let trace = analytic_trace(&CoastdownCoeffs::new(4.0, 0.3, 0.4), kmh_to_mps(35.0), 0.1, 60.0);
        let fit = fit_coastdown(&trace, MASS * scale, RADIUS).unwrap();
        prop_assert!(worst_rel_error(&fit.coeffs, &truth) < 1e-3);
    }
}
