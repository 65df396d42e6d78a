//! Coast-down identification of the resistance polynomial and its
//! linearization around an operating speed.
//!
//! During an unpowered coast the wheel balance reduces to
//! `F(v) = -M R_w dΩ_w/dt`. The wheel acceleration is estimated with a local
//! polynomial (Savitzky-Golay) differentiator and `A, B, C` are the
//! non-negative least-squares fit of `C v^2 + B v + A` to it.
//!
//! Differentiating noisy speed throws away most of the information about
//! `B`, so by default the fit is refined by matching the simulated coast to
//! the measured speeds (output-error least squares, Levenberg-Marquardt).

use alloc::vec::Vec;

use crate::error::{positive, Error, Result};
use crate::params::{BikeParameters, CoastdownCoeffs, VehicleState};
use crate::powertrain::{step_hybrid, PlantInputs};

const MIN_SAMPLES: usize = 10;
const RANK_TOL: f64 = 1e-10;

/// Uniformly sampled wheel speed during a coast-down.
#[derive(Debug, Clone, PartialEq)]
pub struct CoastdownTrace {
    times_s: Vec<f64>,
    wheel_speeds_radps: Vec<f64>,
    sample_period_s: f64,
}

impl CoastdownTrace {
    pub fn new(times_s: Vec<f64>, wheel_speeds_radps: Vec<f64>) -> Result<Self> {
        if times_s.len() != wheel_speeds_radps.len() {
            return Err(Error::InvalidTrace("time and speed columns differ in length"));
        }
        if times_s.len() < MIN_SAMPLES {
            return Err(Error::InvalidTrace("at least 10 samples are required"));
        }
        if times_s.iter().chain(&wheel_speeds_radps).any(|x| !x.is_finite()) {
            return Err(Error::InvalidTrace("non-finite sample"));
        }
        if wheel_speeds_radps.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidTrace("negative wheel speed"));
        }
        if times_s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidTrace("time is not strictly increasing"));
        }
        let n = times_s.len();
        let period = (times_s[n - 1] - times_s[0]) / (n - 1) as f64;
        let uniform = times_s
            .windows(2)
            .all(|w| ((w[1] - w[0]) - period).abs() <= 1e-6 * period);
        if !uniform {
            return Err(Error::InvalidTrace("samples are not uniformly spaced"));
        }
        Ok(Self {
            times_s,
            wheel_speeds_radps,
            sample_period_s: period,
        })
    }

    pub fn from_samples(samples: &[(f64, f64)]) -> Result<Self> {
        let (t, w) = samples.iter().copied().unzip();
        Self::new(t, w)
    }

    pub fn len(&self) -> usize {
        self.times_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times_s.is_empty()
    }

    pub fn sample_period_s(&self) -> f64 {
        self.sample_period_s
    }

    pub fn times(&self) -> &[f64] {
        &self.times_s
    }

    pub fn wheel_speeds(&self) -> &[f64] {
        &self.wheel_speeds_radps
    }

    /// Returns a copy with `noise(i)` added to every speed sample, clamped at
    /// zero.
    pub fn with_noise(&self, mut noise: impl FnMut(usize) -> f64) -> Result<Self> {
        let speeds = self
            .wheel_speeds_radps
            .iter()
            .enumerate()
            .map(|(i, w)| (w + noise(i)).max(0.0))
            .collect();
        Self::new(self.times_s.clone(), speeds)
    }
}

/// Local polynomial used to smooth and differentiate the trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Samples on each side of the centre; the window has `2 h + 1` points.
    pub half_window: usize,
    pub poly_order: usize,
    /// Refine the derivative fit against the speed trajectory.
    pub refine: bool,
}

impl Default for FitOptions {
    /// Five-point local quadratic followed by trajectory refinement.
    fn default() -> Self {
        Self {
            half_window: 2,
            poly_order: 2,
            refine: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoastdownFit {
    pub coeffs: CoastdownCoeffs,
    /// RMS residual of the derivative regression.
    pub residual_rms_n: f64,
    /// Rows of the derivative regression.
    pub samples_used: usize,
}

pub fn fit_coastdown(trace: &CoastdownTrace, mass_kg: f64, wheel_radius_m: f64) -> Result<CoastdownFit> {
    fit_coastdown_with(trace, mass_kg, wheel_radius_m, &FitOptions::default())
}

pub fn fit_coastdown_with(
    trace: &CoastdownTrace,
    mass_kg: f64,
    wheel_radius_m: f64,
    options: &FitOptions,
) -> Result<CoastdownFit> {
    positive("mass_kg", mass_kg)?;
    positive("wheel_radius_m", wheel_radius_m)?;
    let h = options.half_window;
    if h == 0 || options.poly_order == 0 || options.poly_order > 2 * h {
        return Err(Error::InvalidParameter {
            name: "fit_options",
            reason: "need half_window >= 1 and 1 <= poly_order <= 2 * half_window",
        });
    }
    if trace.len() < 2 * h + 1 + 3 {
        return Err(Error::InvalidTrace("trace too short for the smoothing window"));
    }
    let (smooth_w, slope_w) = savitzky_golay_weights(h, options.poly_order);
    let dt = trace.sample_period_s;
    let w = &trace.wheel_speeds_radps;

    let mut rows: Vec<([f64; 3], f64)> = Vec::with_capacity(w.len() - 2 * h);
    for centre in h..w.len() - h {
        let window = &w[centre - h..=centre + h];
        let omega: f64 = window.iter().zip(&smooth_w).map(|(x, c)| x * c).sum();
        let domega: f64 = window.iter().zip(&slope_w).map(|(x, c)| x * c).sum::<f64>() / dt;
        let v = omega * wheel_radius_m;
        let force = -mass_kg * wheel_radius_m * domega;
        rows.push(([v * v, v, 1.0], force));
    }

    let (mut solution, sse) = nonnegative_least_squares(&rows)?;
    if options.refine {
        let speeds: Vec<f64> = w.iter().map(|x| x * wheel_radius_m).collect();
        if let Some(refined) = refine_trajectory(&speeds, dt, mass_kg, solution) {
            solution = refined;
        }
    }
    Ok(CoastdownFit {
        coeffs: CoastdownCoeffs::new(solution[2], solution[1], solution[0]),
        residual_rms_n: libm::sqrt(sse / rows.len() as f64),
        samples_used: rows.len(),
    })
}

/// Coast of `M dv/dt = -(C v^2 + B v + A)` sampled every `dt`, with the
/// sensitivities of `v` to `[C, B, A, v0]`. Speed stops at zero.
fn coast_with_sensitivities(c: &[f64; 3], v0: f64, mass_kg: f64, dt: f64, n: usize) -> Vec<[f64; 5]> {
    let sub = libm::ceil(dt / 1e-3).max(1.0) as usize;
    let h = dt / sub as f64;
    let deriv = |y: &[f64; 5]| -> [f64; 5] {
        let v = y[0];
        let dfdv = -(2.0 * c[0] * v + c[1]) / mass_kg;
        let dfdp = [-v * v / mass_kg, -v / mass_kg, -1.0 / mass_kg, 0.0];
        let mut d = [0.0; 5];
        d[0] = -(c[0] * v * v + c[1] * v + c[2]) / mass_kg;
        for k in 0..4 {
            d[k + 1] = dfdv * y[k + 1] + dfdp[k];
        }
        d
    };
    let axpy = |y: &[f64; 5], k: &[f64; 5], a: f64| -> [f64; 5] { core::array::from_fn(|i| y[i] + a * k[i]) };
    let mut y = [v0, 0.0, 0.0, 0.0, 1.0];
    let mut stopped = v0 <= 0.0;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i > 0 && !stopped {
            for _ in 0..sub {
                let k1 = deriv(&y);
                let k2 = deriv(&axpy(&y, &k1, 0.5 * h));
                let k3 = deriv(&axpy(&y, &k2, 0.5 * h));
                let k4 = deriv(&axpy(&y, &k3, h));
                y = core::array::from_fn(|j| y[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]));
                if y[0] <= 0.0 {
                    stopped = true;
                    break;
                }
            }
        }
        if stopped {
            y = [0.0; 5];
        }
        out.push(y);
    }
    out
}

/// Output-error Levenberg-Marquardt over `[C, B, A, v0]`. Coefficients that
/// would turn negative are pinned at zero. `None` if no improvement is found.
fn refine_trajectory(speeds: &[f64], dt: f64, mass_kg: f64, start: [f64; 3]) -> Option<[f64; 3]> {
    let n = speeds.len();
    let cost = |c: &[f64; 3], v0: f64| -> f64 {
        coast_with_sensitivities(c, v0, mass_kg, dt, n)
            .iter()
            .zip(speeds)
            .map(|(y, m)| (y[0] - m) * (y[0] - m))
            .sum()
    };
    let mut c = start;
    let mut v0 = speeds[0];
    let mut free = [c[0] > 0.0, c[1] > 0.0, c[2] > 0.0, true];
    let mut current = cost(&c, v0);
    let initial = current;
    let mut lambda = 1e-3;
    for _ in 0..100 {
        let traj = coast_with_sensitivities(&c, v0, mass_kg, dt, n);
        let idx: Vec<usize> = (0..4).filter(|&k| free[k]).collect();
        let m = idx.len();
        let mut jtj = alloc::vec![alloc::vec![0.0; m]; m];
        let mut jtr = alloc::vec![0.0; m];
        for (y, meas) in traj.iter().zip(speeds) {
            let r = y[0] - meas;
            for (a, &ka) in idx.iter().enumerate() {
                jtr[a] -= y[ka + 1] * r;
                for (b, &kb) in idx.iter().enumerate() {
                    jtj[a][b] += y[ka + 1] * y[kb + 1];
                }
            }
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut damped = jtj.clone();
            for (a, row) in damped.iter_mut().enumerate() {
                row[a] += lambda * jtj[a][a].max(f64::MIN_POSITIVE);
            }
            let Some(step) = solve_dense(damped, jtr.clone()) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial_c = c;
            let mut trial_v0 = v0;
            for (a, &k) in idx.iter().enumerate() {
                if k < 3 {
                    trial_c[k] += step[a];
                } else {
                    trial_v0 += step[a];
                }
            }
            let pinned: Vec<usize> = (0..3).filter(|&k| free[k] && trial_c[k] < 0.0).collect();
            for &k in &pinned {
                trial_c[k] = 0.0;
            }
            let trial = cost(&trial_c, trial_v0);
            if trial.is_finite() && trial < current {
                for &k in &pinned {
                    free[k] = false;
                }
                let converged = current - trial <= 1e-12 * current;
                c = trial_c;
                v0 = trial_v0;
                current = trial;
                lambda = (lambda * 0.1).max(1e-12);
                improved = !converged;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    (current <= initial && c.iter().all(|x| x.is_finite())).then_some(c)
}

/// Weights giving the smoothed value and the first derivative (per sample)
/// at the window centre.
fn savitzky_golay_weights(half_window: usize, order: usize) -> (Vec<f64>, Vec<f64>) {
    let m = order + 1;
    let offsets: Vec<f64> = (0..2 * half_window + 1)
        .map(|k| k as f64 - half_window as f64)
        .collect();
    // Normal matrix of the Vandermonde system.
    let mut gram = alloc::vec![alloc::vec![0.0; m]; m];
    for &x in &offsets {
        for (i, row) in gram.iter_mut().enumerate() {
            for (j, g) in row.iter_mut().enumerate() {
                *g += libm::pow(x, (i + j) as f64);
            }
        }
    }
    // Row i of gram^-1 applied to the monomials gives the weights of
    // coefficient i.
    let e0 = solve_dense(gram.clone(), unit(m, 0)).expect("Vandermonde normal matrix is regular");
    let e1 = solve_dense(gram, unit(m, 1)).expect("Vandermonde normal matrix is regular");
    let weights = |e: &[f64]| -> Vec<f64> {
        offsets
            .iter()
            .map(|&x| e.iter().enumerate().map(|(j, c)| c * libm::pow(x, j as f64)).sum())
            .collect()
    };
    (weights(&e0), weights(&e1))
}

fn unit(n: usize, i: usize) -> Vec<f64> {
    let mut v = alloc::vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Gaussian elimination with partial pivoting; `None` on a vanishing pivot
/// relative to the largest diagonal entry.
fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = (0..n).map(|i| a[i][i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() <= RANK_TOL * scale {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        let (upper, lower) = a.split_at_mut(col + 1);
        let pivot_row = &upper[col];
        for (offset, row) in lower.iter_mut().enumerate() {
            let f = row[col] / pivot_row[col];
            for (x, p) in row[col..].iter_mut().zip(&pivot_row[col..]) {
                *x -= f * p;
            }
            b[col + 1 + offset] -= f * b[col];
        }
    }
    let mut x = alloc::vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Least squares over the column subset `free` with columns scaled to unit
/// norm. Returns the full coefficient vector (zeros outside `free`).
fn subset_least_squares(rows: &[([f64; 3], f64)], free: &[usize]) -> Option<[f64; 3]> {
    let norms: Vec<f64> = free
        .iter()
        .map(|&j| libm::sqrt(rows.iter().map(|(x, _)| x[j] * x[j]).sum::<f64>()))
        .collect();
    if norms.contains(&0.0) {
        return None;
    }
    let k = free.len();
    let mut gram = alloc::vec![alloc::vec![0.0; k]; k];
    let mut rhs = alloc::vec![0.0; k];
    for (x, y) in rows {
        for a in 0..k {
            let xa = x[free[a]] / norms[a];
            rhs[a] += xa * y;
            for b in 0..k {
                gram[a][b] += xa * x[free[b]] / norms[b];
            }
        }
    }
    let scaled = solve_dense(gram, rhs)?;
    let mut out = [0.0; 3];
    for (a, &j) in free.iter().enumerate() {
        out[j] = scaled[a] / norms[a];
    }
    Some(out)
}

fn sum_squared_error(rows: &[([f64; 3], f64)], c: &[f64; 3]) -> f64 {
    rows.iter()
        .map(|(x, y)| {
            let r = x[0] * c[0] + x[1] * c[1] + x[2] * c[2] - y;
            r * r
        })
        .sum()
}

/// Exact non-negative least squares for three unknowns: every active set is
/// tried and the feasible one with the smallest residual wins.
fn nonnegative_least_squares(rows: &[([f64; 3], f64)]) -> Result<([f64; 3], f64)> {
    let full = subset_least_squares(rows, &[0, 1, 2]).ok_or(Error::NotIdentifiable)?;
    if full.iter().all(|&c| c >= 0.0) {
        return Ok((full, sum_squared_error(rows, &full)));
    }
    let subsets: [&[usize]; 7] = [&[0, 1], &[0, 2], &[1, 2], &[0], &[1], &[2], &[]];
    let mut best = ([0.0; 3], sum_squared_error(rows, &[0.0; 3]));
    for free in subsets {
        if let Some(c) = subset_least_squares(rows, free) {
            if c.iter().all(|&x| x >= 0.0) {
                let sse = sum_squared_error(rows, &c);
                if sse < best.1 {
                    best = (c, sse);
                }
            }
        }
    }
    Ok(best)
}

/// Residual of a constant-speed check: `F(v̄) - T_m / R_w`.
pub fn validate_constant_speed(
    coeffs: &CoastdownCoeffs,
    speed_mps: f64,
    motor_torque_nm: f64,
    wheel_radius_m: f64,
) -> f64 {
    coeffs.eval(speed_mps) - motor_torque_nm / wheel_radius_m
}

/// Slope of the resistance at the operating speed, `2 C v̄ + B`.
pub fn linearize_beta(coeffs: &CoastdownCoeffs, speed_mps: f64) -> f64 {
    coeffs.slope(speed_mps)
}

/// Forward-simulates an unpowered coast with the plant model and samples the
/// wheel speed every `sample_period_s` until `duration_s` or standstill.
pub fn simulate_coastdown(
    coeffs: &CoastdownCoeffs,
    mass_kg: f64,
    wheel_radius_m: f64,
    initial_speed_mps: f64,
    sample_period_s: f64,
    duration_s: f64,
) -> Result<CoastdownTrace> {
    positive("mass_kg", mass_kg)?;
    positive("sample_period_s", sample_period_s)?;
    let params = BikeParameters {
        bike_mass_kg: 0.5 * mass_kg,
        rider_mass_kg: 0.5 * mass_kg,
        wheel_radius_m,
        ..BikeParameters::prototype(0.0)
    };
    let substeps = libm::ceil(sample_period_s / 1e-3).max(1.0) as usize;
    let dt = sample_period_s / substeps as f64;
    let mut state = VehicleState {
        time_s: 0.0,
        speed_mps: initial_speed_mps,
        pedal_speed_radps: 0.0,
        clutch_engaged: false,
        soc_fraction: 0.5,
    };
    let samples = libm::floor(duration_s / sample_period_s + 1e-9) as usize + 1;
    let mut times = Vec::with_capacity(samples);
    let mut speeds = Vec::with_capacity(samples);
    for k in 0..samples {
        if state.speed_mps <= 0.0 {
            break;
        }
        times.push(k as f64 * sample_period_s);
        speeds.push(state.speed_mps / wheel_radius_m);
        for _ in 0..substeps {
            state = step_hybrid(&state, &PlantInputs::default(), &params, coeffs, dt)?.state;
        }
    }
    CoastdownTrace::new(times, speeds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    const MASS: f64 = 95.0;
    const RADIUS: f64 = 0.33;

    fn truth() -> CoastdownCoeffs {
        CoastdownCoeffs::new(4.0, 0.3, 0.4)
    }

    #[test]
    fn savitzky_golay_five_point_quadratic() {
        let (s, d) = savitzky_golay_weights(2, 2);
        let expected_s = [-3.0, 12.0, 17.0, 12.0, -3.0].map(|x| x / 35.0);
        let expected_d = [-2.0, -1.0, 0.0, 1.0, 2.0].map(|x| x / 10.0);
        for i in 0..5 {
            assert!((s[i] - expected_s[i]).abs() < 1e-12);
            assert!((d[i] - expected_d[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn trace_validation() {
        let t: Vec<f64> = (0..10).map(|k| k as f64 * 0.1).collect();
        assert!(CoastdownTrace::new(t.clone(), vec![1.0; 10]).is_ok());
        assert!(CoastdownTrace::new(t[..9].to_vec(), vec![1.0; 9]).is_err());
        assert!(CoastdownTrace::new(t.clone(), vec![-1.0; 10]).is_err());
        let mut bad = t.clone();
        bad[5] = bad[4];
        assert!(CoastdownTrace::new(bad, vec![1.0; 10]).is_err());
        let mut uneven = t;
        uneven[5] += 0.03;
        assert!(CoastdownTrace::new(uneven, vec![1.0; 10]).is_err());
    }

    #[test]
    fn noiseless_recovery_is_exact() {
        let trace = simulate_coastdown(&truth(), MASS, RADIUS, 8.0, 0.01, 60.0).unwrap();
        let fit = fit_coastdown(&trace, MASS, RADIUS).unwrap();
        let c = fit.coeffs;
        assert!((c.constant_n - 4.0).abs() / 4.0 < 1e-3, "{c:?}");
        assert!((c.linear_n_per_mps - 0.3).abs() / 0.3 < 1e-3, "{c:?}");
        assert!((c.quadratic_n_per_mps2 - 0.4).abs() / 0.4 < 1e-3, "{c:?}");
        assert!(fit.residual_rms_n < 1e-6, "rms {}", fit.residual_rms_n);
    }

    #[test]
    fn constant_speed_is_not_identifiable() {
        let t: Vec<f64> = (0..50).map(|k| k as f64 * 0.1).collect();
        let trace = CoastdownTrace::new(t, vec![10.0; 50]).unwrap();
        assert_eq!(fit_coastdown(&trace, MASS, RADIUS), Err(Error::NotIdentifiable));
    }

    #[test]
    fn negative_coefficients_are_clamped() {
        // pure quadratic + constant resistance, no viscous term
        let truth = CoastdownCoeffs::new(5.0, 0.0, 0.5);
        let trace = simulate_coastdown(&truth, MASS, RADIUS, 8.0, 0.01, 40.0).unwrap();
        // large deterministic disturbance pushes the unconstrained B negative
        let noisy = trace
            .with_noise(|i| -0.2 * libm::sin(i as f64 * 0.0007))
            .unwrap();
        let fit = fit_coastdown(&noisy, MASS, RADIUS).unwrap();
        let c = fit.coeffs;
        assert!(c.constant_n >= 0.0 && c.linear_n_per_mps >= 0.0 && c.quadratic_n_per_mps2 >= 0.0);
    }

    #[test]
    fn invalid_fit_options() {
        let trace = simulate_coastdown(&truth(), MASS, RADIUS, 8.0, 0.1, 30.0).unwrap();
        let bad = FitOptions {
            refine: false,
            half_window: 1,
            poly_order: 3,
        };
        assert!(fit_coastdown_with(&trace, MASS, RADIUS, &bad).is_err());
        assert!(fit_coastdown(&trace, 0.0, RADIUS).is_err());
    }

    #[test]
    fn constant_speed_validation() {
        let c = truth();
        assert!((c.eval(3.0) - 8.5).abs() < 1e-12);
        assert!(validate_constant_speed(&c, 3.0, RADIUS * c.eval(3.0), RADIUS).abs() < 1e-12);
        assert!(validate_constant_speed(&c, 3.0, 2.805, RADIUS).abs() < 1e-12);
        assert!((validate_constant_speed(&c, 3.0, 0.0, RADIUS) - 8.5).abs() < 1e-12);
    }

    #[test]
    fn beta_values() {
        let c = CoastdownCoeffs::new(0.0, 1.0, 1.0);
        assert_eq!(linearize_beta(&c, 2.0), 5.0);
        assert_eq!(linearize_beta(&truth(), 0.0), 0.3);
        let vbar = 6.5 / 3.6;
        assert!((linearize_beta(&truth(), vbar) - 1.744_444_444_444_444_4).abs() < 1e-12);
    }

    proptest::proptest! {
        /// The linearization slope matches a central finite difference.
        #[test]
        fn beta_is_the_resistance_slope(a in 0.0f64..20.0, b in 0.0f64..5.0, c in 0.0f64..2.0, v in 0.0f64..20.0) {
            let k = CoastdownCoeffs::new(a, b, c);
            let h = 1e-4;
            let fd = (k.eval(v + h) - k.eval(v - h)) / (2.0 * h);
            proptest::prop_assert!((linearize_beta(&k, v) - fd).abs() < 1e-6);
        }
    }
}
