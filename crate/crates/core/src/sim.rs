//! Closed-loop simulation: rider, controller and plant stepped together, with
//! battery accounting, logging and post-processing helpers.
//!
//! The controller runs every control period and its commands are held over
//! the plant steps in between. One log record is taken at every control
//! instant, including the final one.

use alloc::vec::Vec;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::controllers::{
    ActuatorLag, Branch, ControlOutput, Controller, ControllerConfig, ImpedanceSample, Measurement,
};
use crate::error::{non_negative, positive, Error, Result};
use crate::params::{BikeParameters, CoastdownCoeffs, VehicleState, SPEED_EPS};
use crate::powertrain::{
    chain_torque, kinetic_energy, resolve_clutch, step_hybrid_with, ClutchEvent, ClutchTransition, PlantInputs,
    StepEnergy, StepOptions,
};
use crate::rider::{Rider, RiderScript};

/// Minimum spacing between clutch transitions, in control periods.
pub const DEFAULT_DWELL_PERIODS: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Battery {
    pub capacity_wh: f64,
    pub charge_efficiency: f64,
    pub discharge_efficiency: f64,
}

impl Default for Battery {
    fn default() -> Self {
        Self {
            capacity_wh: 400.0,
            charge_efficiency: 1.0,
            discharge_efficiency: 1.0,
        }
    }
}

impl Battery {
    pub fn validate(&self) -> Result<()> {
        positive("battery.capacity_wh", self.capacity_wh)?;
        for (name, eta) in [
            ("battery.charge_efficiency", self.charge_efficiency),
            ("battery.discharge_efficiency", self.discharge_efficiency),
        ] {
            if !(eta > 0.0 && eta <= 1.0) {
                return Err(Error::InvalidParameter {
                    name,
                    reason: "must lie in (0, 1]",
                });
            }
        }
        Ok(())
    }

    /// Energy drawn from the cells for `energy_j` delivered to (positive) or
    /// received from (negative) a machine.
    pub fn drawn_energy(&self, energy_j: f64) -> f64 {
        if energy_j >= 0.0 {
            energy_j / self.discharge_efficiency
        } else {
            energy_j * self.charge_efficiency
        }
    }
}

/// Additive Gaussian noise on the measured pedal and wheel speeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorNoise {
    pub pedal_sigma_radps: f64,
    pub wheel_sigma_radps: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub params: BikeParameters,
    pub coeffs: CoastdownCoeffs,
    pub script: RiderScript,
    pub controller: ControllerConfig,
    pub lag: ActuatorLag,
    pub initial_state: VehicleState,
    pub duration_s: f64,
    pub plant_dt_s: f64,
    pub control_period_s: f64,
    pub battery: Battery,
    pub noise: Option<SensorNoise>,
    pub dwell_periods: u32,
}

impl Scenario {
    /// Defaults: 1 ms plant step, 10 ms control period, ideal actuators,
    /// lossless battery at 50 %, bike at rest and the run as long as the script.
    pub fn new(
        params: BikeParameters,
        coeffs: CoastdownCoeffs,
        script: RiderScript,
        controller: ControllerConfig,
    ) -> Self {
        let duration_s = script.horizon_s();
        Self {
            params,
            coeffs,
            script,
            controller,
            lag: ActuatorLag::ideal(),
            initial_state: VehicleState::at_rest(0.5),
            duration_s,
            plant_dt_s: 1e-3,
            control_period_s: 1e-2,
            battery: Battery::default(),
            noise: None,
            dwell_periods: DEFAULT_DWELL_PERIODS,
        }
    }

    /// Plant steps per control period.
    pub fn substeps(&self) -> Result<usize> {
        positive("sim.plant_dt_s", self.plant_dt_s)?;
        positive("sim.control_period_s", self.control_period_s)?;
        let n = libm::round(self.control_period_s / self.plant_dt_s);
        if n < 1.0 || (n * self.plant_dt_s - self.control_period_s).abs() > 1e-9 * self.control_period_s {
            return Err(Error::InvalidParameter {
                name: "sim.control_period_s",
                reason: "must be an integer multiple of the plant step",
            });
        }
        Ok(n as usize)
    }

    /// Number of control periods in the run.
    pub fn ticks(&self) -> Result<usize> {
        let n = libm::round(self.duration_s / self.control_period_s);
        if n < 1.0 || (n * self.control_period_s - self.duration_s).abs() > 1e-9 * self.duration_s {
            return Err(Error::InvalidParameter {
                name: "sim.duration_s",
                reason: "must be a positive multiple of the control period",
            });
        }
        Ok(n as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate().into_result()?;
        if self.params.generator_inertia_kgm2 <= 0.0 {
            return Err(Error::InvalidParameter {
                name: "bike.generator_inertia_kgm2",
                reason: "the simulator needs a pedal inertia greater than zero",
            });
        }
        self.coeffs.validate()?;
        self.controller.validate()?;
        self.battery.validate()?;
        positive("sim.duration_s", self.duration_s)?;
        self.substeps()?;
        self.ticks()?;
        if self.duration_s > self.script.horizon_s() * (1.0 + 1e-12) {
            return Err(Error::InvalidParameter {
                name: "sim.duration_s",
                reason: "exceeds the rider script",
            });
        }
        let s = &self.initial_state;
        non_negative("initial.speed_mps", s.speed_mps)?;
        non_negative("initial.pedal_speed_radps", s.pedal_speed_radps)?;
        if !(0.0..=1.0).contains(&s.soc_fraction) {
            return Err(Error::InvalidParameter {
                name: "initial.soc",
                reason: "must lie in [0, 1]",
            });
        }
        let gap = s.lock_gap(&self.params);
        if gap > SPEED_EPS || (s.clutch_engaged && gap.abs() > SPEED_EPS) {
            return Err(Error::InvalidParameter {
                name: "initial.pedal_speed_radps",
                reason: "inconsistent with the freewheel",
            });
        }
        if let Some(n) = &self.noise {
            non_negative("noise.pedal_sigma_radps", n.pedal_sigma_radps)?;
            non_negative("noise.wheel_sigma_radps", n.wheel_sigma_radps)?;
        }
        Ok(())
    }
}

/// One logged control instant. Torques are the values applied to the plant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub time_s: f64,
    pub speed_mps: f64,
    pub pedal_speed_radps: f64,
    pub wheel_speed_radps: f64,
    pub engaged: bool,
    pub human_torque_nm: f64,
    pub motor_torque_nm: f64,
    pub generator_torque_nm: f64,
    pub chain_torque_nm: f64,
    pub ratio: f64,
    pub kappa: Option<f64>,
    /// Mechanical motor power `T_m Ω_w`.
    pub motor_power_w: f64,
    /// Power absorbed by the generator, `-T_g Ω_p`.
    pub generator_power_w: f64,
    pub soc: f64,
}

impl LogRecord {
    pub fn impedance_sample(&self) -> ImpedanceSample {
        ImpedanceSample {
            time_s: self.time_s,
            speed_mps: self.speed_mps,
            human_torque_nm: self.human_torque_nm,
            ratio: self.ratio,
            engaged: self.engaged,
        }
    }
}

/// Controller internals at a control instant, before saturation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerRecord {
    pub time_s: f64,
    pub branch: Option<Branch>,
    pub motor_reference_nm: f64,
    pub generator_reference_nm: f64,
    pub rider_torque_estimate_nm: Option<f64>,
    pub scaled_rider_torque_nm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SimEvent {
    Clutch(ClutchEvent),
    BranchSwitch { time_s: f64, branch: Branch },
    MotorSaturation { time_s: f64, active: bool },
    GeneratorSaturation { time_s: f64, active: bool },
    FilterInitialized { time_s: f64, speed_mps: f64 },
    SocClamped { time_s: f64, soc: f64 },
}

impl SimEvent {
    pub fn time_s(&self) -> f64 {
        match *self {
            SimEvent::Clutch(e) => e.time_s,
            SimEvent::BranchSwitch { time_s, .. }
            | SimEvent::MotorSaturation { time_s, .. }
            | SimEvent::GeneratorSaturation { time_s, .. }
            | SimEvent::FilterInitialized { time_s, .. }
            | SimEvent::SocClamped { time_s, .. } => time_s,
        }
    }
}

/// Energy balance of a run. `human_j` should equal `balance_j()`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EnergyAudit {
    pub human_j: f64,
    pub kinetic_change_j: f64,
    /// Change of stored battery energy.
    pub battery_change_j: f64,
    /// Battery conversion losses (zero for a lossless battery).
    pub conversion_loss_j: f64,
    pub resistance_j: f64,
    pub brake_j: f64,
    pub impact_j: f64,
    pub standstill_j: f64,
    pub motor_j: f64,
    pub generator_j: f64,
}

impl EnergyAudit {
    pub fn balance_j(&self) -> f64 {
        self.kinetic_change_j
            + self.battery_change_j
            + self.conversion_loss_j
            + self.resistance_j
            + self.brake_j
            + self.impact_j
            + self.standstill_j
    }

    /// Mismatch relative to the largest term of the balance.
    pub fn relative_error(&self) -> f64 {
        let scale = [
            self.human_j,
            self.kinetic_change_j,
            self.battery_change_j,
            self.resistance_j,
            self.brake_j,
        ]
        .iter()
        .fold(1e-9f64, |m, x| m.max(x.abs()));
        (self.human_j - self.balance_j()).abs() / scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub control_period_s: f64,
    pub records: Vec<LogRecord>,
    pub controller: Vec<ControllerRecord>,
    pub events: Vec<SimEvent>,
    pub energy: EnergyAudit,
}

impl SimLog {
    pub fn clutch_events(&self) -> impl Iterator<Item = &ClutchEvent> {
        self.events.iter().filter_map(|e| match e {
            SimEvent::Clutch(c) => Some(c),
            _ => None,
        })
    }

    /// Shortest time between consecutive clutch transitions.
    pub fn min_clutch_dwell_s(&self) -> Option<f64> {
        let times: Vec<f64> = self.clutch_events().map(|e| e.time_s).collect();
        times.windows(2).map(|w| w[1] - w[0]).reduce(f64::min)
    }

    pub fn impedance_samples(&self) -> Vec<ImpedanceSample> {
        self.records.iter().map(LogRecord::impedance_sample).collect()
    }
}

/// Plant state, rider and controller advanced together.
pub fn run_scenario(scenario: &Scenario) -> Result<SimLog> {
    scenario.validate()?;
    let params = &scenario.params;
    let substeps = scenario.substeps()?;
    let ticks = scenario.ticks()?;
    let dt = scenario.plant_dt_s;
    let period = scenario.control_period_s;
    let dwell_s = scenario.dwell_periods as f64 * period;

    let mut controller = Controller::new(scenario.controller, params, period)?;
    let mut lag = scenario.lag;
    let mut rider = Rider::new(scenario.script.clone());
    let mut noise = match scenario.noise {
        Some(n) => Some((
            ChaCha8Rng::seed_from_u64(n.seed),
            Normal::new(0.0, n.pedal_sigma_radps).map_err(|_| Error::InvalidParameter {
                name: "noise.pedal_sigma_radps",
                reason: "invalid standard deviation",
            })?,
            Normal::new(0.0, n.wheel_sigma_radps).map_err(|_| Error::InvalidParameter {
                name: "noise.wheel_sigma_radps",
                reason: "invalid standard deviation",
            })?,
        )),
        None => None,
    };

    let mut state = scenario.initial_state;
    state.time_s = 0.0;
    let initial_kinetic = kinetic_energy(&state, params);
    let mut work = StepEnergy::default();
    let mut battery_change = 0.0;
    let mut conversion_loss = 0.0;
    let mut last_transition: Option<f64> = None;

    let mut log = SimLog {
        control_period_s: period,
        records: Vec::with_capacity(ticks + 1),
        controller: Vec::with_capacity(ticks + 1),
        events: Vec::new(),
        energy: EnergyAudit::default(),
    };
    let mut previous: Option<ControlOutput> = None;
    let mut applied = (0.0, 0.0);

    for k in 0..=ticks {
        let t = k as f64 * period;
        state.time_s = t;
        let human = rider.torque(t, state.pedal_speed_radps)?;
        let wheel = state.wheel_speed(params);
        if k == ticks {
            log.records.push(record(&state, params, human, applied, 0.0, previous));
            break;
        }

        let (pedal_meas, wheel_meas) = match noise.as_mut() {
            Some((rng, np, nw)) => (
                state.pedal_speed_radps + np.sample(rng),
                wheel + nw.sample(rng),
            ),
            None => (state.pedal_speed_radps, wheel),
        };
        let measurement = Measurement {
            speed_mps: wheel_meas.max(0.0) * params.wheel_radius_m,
            pedal_speed_radps: pedal_meas,
            wheel_speed_radps: wheel_meas,
            engaged: state.clutch_engaged,
            generator_torque_nm: applied.1,
            rider_torque_sensor_nm: Some(human),
        };
        let snapshot = controller.clone();
        let mut out = controller.step(&measurement)?;
        if state.clutch_engaged {
            // When the new commands release the chain right away, the
            // controller sees the release at this instant.
            let mut probe = lag;
            let inputs = PlantInputs {
                human_torque_nm: human,
                motor_torque_nm: probe.motor.step(out.motor_torque_nm, dt),
                generator_torque_nm: probe.generator.step(out.generator_torque_nm, dt),
                brake_torque_nm: 0.0,
            };
            if resolve_clutch(&state, &inputs, params, &scenario.coeffs).event.is_some() {
                controller = snapshot;
                out = controller.step(&Measurement {
                    engaged: false,
                    ..measurement
                })?;
            }
        }
        track_events(&mut log.events, t, &out, previous.as_ref(), state.speed_mps);
        log.controller.push(ControllerRecord {
            time_s: t,
            branch: out.branch,
            motor_reference_nm: out.motor_reference_nm,
            generator_reference_nm: out.generator_reference_nm,
            rider_torque_estimate_nm: out.rider_torque_estimate_nm,
            scaled_rider_torque_nm: out.scaled_rider_torque_nm,
        });

        for j in 0..substeps {
            let t_j = t + j as f64 * dt;
            state.time_s = t_j;
            let human_j = if j == 0 {
                human
            } else {
                rider.torque(t_j, state.pedal_speed_radps)?
            };
            applied = (
                lag.motor.step(out.motor_torque_nm, dt),
                lag.generator.step(out.generator_torque_nm, dt),
            );
            let inputs = PlantInputs {
                human_torque_nm: human_j,
                motor_torque_nm: applied.0,
                generator_torque_nm: applied.1,
                brake_torque_nm: 0.0,
            };
            let allow_engagement = last_transition.is_none_or(|tr| t_j + dt - tr >= dwell_s - 1e-9);
            let step = step_hybrid_with(
                &state,
                &inputs,
                params,
                &scenario.coeffs,
                dt,
                StepOptions { allow_engagement },
            )?;
            if j == 0 {
                // Clutch state after release under the new commands.
                let mut resolved = state;
                resolved.clutch_engaged = state.clutch_engaged && step.released.is_none();
                log.records.push(record(&resolved, params, human, applied, step.chain_torque_nm, Some(out)));
            }
            for event in step.events() {
                last_transition = Some(event.time_s);
                log.events.push(SimEvent::Clutch(event));
            }
            rider.advance(state.pedal_speed_radps, step.state.pedal_speed_radps, dt);
            work.accumulate(&step.energy);

            let drawn = scenario.battery.drawn_energy(step.energy.motor_j)
                + scenario.battery.drawn_energy(step.energy.generator_j);
            let delivered = step.energy.motor_j + step.energy.generator_j;
            let (soc, clamped) = soc_from_energy(step.state.soc_fraction, drawn, scenario.battery.capacity_wh);
            if clamped {
                log.events.push(SimEvent::SocClamped {
                    time_s: step.state.time_s,
                    soc,
                });
            }
            battery_change -= drawn;
            conversion_loss += drawn - delivered;
            state = step.state;
            state.soc_fraction = soc;
            state.time_s = t + (j + 1) as f64 * dt;
        }
        previous = Some(out);
    }

    log.energy = EnergyAudit {
        human_j: work.human_j,
        kinetic_change_j: kinetic_energy(&state, params) - initial_kinetic,
        battery_change_j: battery_change,
        conversion_loss_j: conversion_loss,
        resistance_j: work.resistance_j,
        brake_j: -work.brake_j,
        impact_j: work.impact_j,
        standstill_j: work.standstill_j,
        motor_j: work.motor_j,
        generator_j: work.generator_j,
    };
    Ok(log)
}

fn record(
    state: &VehicleState,
    params: &BikeParameters,
    human: f64,
    applied: (f64, f64),
    chain: f64,
    out: Option<ControlOutput>,
) -> LogRecord {
    let wheel = state.wheel_speed(params);
    LogRecord {
        time_s: state.time_s,
        speed_mps: state.speed_mps,
        pedal_speed_radps: state.pedal_speed_radps,
        wheel_speed_radps: wheel,
        engaged: state.clutch_engaged,
        human_torque_nm: human,
        motor_torque_nm: applied.0,
        generator_torque_nm: applied.1,
        chain_torque_nm: if state.clutch_engaged {
            chain
        } else {
            0.0
        },
        ratio: out.map_or(params.chain_ratio, |o| o.ratio),
        kappa: out.and_then(|o| o.kappa),
        motor_power_w: applied.0 * wheel,
        generator_power_w: -applied.1 * state.pedal_speed_radps,
        soc: state.soc_fraction,
    }
}

fn track_events(
    events: &mut Vec<SimEvent>,
    t: f64,
    out: &ControlOutput,
    previous: Option<&ControlOutput>,
    speed_mps: f64,
) {
    if out.filter_initialized {
        events.push(SimEvent::FilterInitialized { time_s: t, speed_mps });
    }
    let prev_branch = previous.and_then(|p| p.branch);
    if let Some(branch) = out.branch {
        if prev_branch != Some(branch) {
            events.push(SimEvent::BranchSwitch { time_s: t, branch });
        }
    }
    let prev_motor = previous.is_some_and(|p| p.motor_saturated());
    if out.motor_saturated() != prev_motor {
        events.push(SimEvent::MotorSaturation {
            time_s: t,
            active: out.motor_saturated(),
        });
    }
    let prev_gen = previous.is_some_and(|p| p.generator_saturated());
    if out.generator_saturated() != prev_gen {
        events.push(SimEvent::GeneratorSaturation {
            time_s: t,
            active: out.generator_saturated(),
        });
    }
}

fn soc_from_energy(soc: f64, drawn_j: f64, capacity_wh: f64) -> (f64, bool) {
    let next = soc - drawn_j / (3600.0 * capacity_wh);
    let clamped = next.clamp(0.0, 1.0);
    (clamped, clamped != next)
}

/// Battery state of charge after `dt_s` with the motor drawing `motor_power_w`
/// and the generator feeding `generator_power_w` (both electrical, lossless
/// machines). Returns the clamped value and whether the clamp was hit.
pub fn soc_update(
    soc: f64,
    motor_power_w: f64,
    generator_power_w: f64,
    battery: &Battery,
    dt_s: f64,
) -> Result<(f64, bool)> {
    battery.validate()?;
    let drawn = battery.drawn_energy(motor_power_w * dt_s) + battery.drawn_energy(-generator_power_w * dt_s);
    Ok(soc_from_energy(soc, drawn, battery.capacity_wh))
}

/// Response of the virtual bike `M_v dw/dt + β_v w = T_h / (τ_v R_w)` to the
/// logged rider torque, restarted from the logged speed at every release of
/// the chain. Engaged samples have no reference.
pub fn virtual_model_reference(
    records: &[LogRecord],
    virtual_mass_kg: f64,
    virtual_beta: f64,
    wheel_radius_m: f64,
) -> Result<Vec<Option<f64>>> {
    positive("virtual_mass_kg", virtual_mass_kg)?;
    positive("virtual_beta", virtual_beta)?;
    positive("wheel_radius_m", wheel_radius_m)?;
    if !records.iter().any(|r| !r.engaged) {
        return Err(Error::NoDisengagement);
    }
    let mut out = Vec::with_capacity(records.len());
    let mut w: Option<f64> = None;
    for (k, r) in records.iter().enumerate() {
        if r.engaged {
            w = None;
            out.push(None);
            continue;
        }
        let current = *w.get_or_insert(r.speed_mps);
        out.push(Some(current));
        if let Some(next) = records.get(k + 1) {
            let dt = next.time_s - r.time_s;
            let u = r.human_torque_nm / (r.ratio * wheel_radius_m);
            let dw = (u - virtual_beta * current) / (virtual_mass_kg / dt + 0.5 * virtual_beta);
            w = Some(current + dw);
        }
    }
    Ok(out)
}

/// Relative RMS gap between logged speed and a reference, over samples at
/// least `settle_s` after each restart of the reference.
pub fn tracking_rms_error(records: &[LogRecord], reference: &[Option<f64>], settle_s: f64) -> Option<f64> {
    let mut start: Option<f64> = None;
    let (mut err2, mut ref2, mut n) = (0.0, 0.0, 0usize);
    for (r, w) in records.iter().zip(reference) {
        match w {
            None => start = None,
            Some(w) => {
                let t0 = *start.get_or_insert(r.time_s);
                if r.time_s - t0 >= settle_s {
                    err2 += (r.speed_mps - w) * (r.speed_mps - w);
                    ref2 += w * w;
                    n += 1;
                }
            }
        }
    }
    (n > 0 && ref2 > 0.0).then(|| libm::sqrt(err2 / ref2))
}

/// Default quality factor of the ripple notch.
pub const DEFAULT_NOTCH_Q: f64 = 5.0;

/// Zero-phase notch at the pedalling ripple frequency (twice the crank
/// frequency), applied forward and backward.
pub fn notch_postprocess(series: &[f64], sample_period_s: f64, cadence_radps: f64, q: f64) -> Result<Vec<f64>> {
    positive("sample_period_s", sample_period_s)?;
    positive("cadence_radps", cadence_radps)?;
    positive("notch_q", q)?;
    let frequency_hz = 2.0 * cadence_radps / (2.0 * core::f64::consts::PI);
    let nyquist_hz = 0.5 / sample_period_s;
    if frequency_hz >= nyquist_hz {
        return Err(Error::NotchAboveNyquist {
            frequency_hz,
            nyquist_hz,
        });
    }
    if series.len() < 2 {
        return Ok(series.to_vec());
    }
    let w0 = 2.0 * cadence_radps * sample_period_s;
    let alpha = libm::sin(w0) / (2.0 * q);
    let a0 = 1.0 + alpha;
    let c = -2.0 * libm::cos(w0) / a0;
    let b = [1.0 / a0, c, 1.0 / a0];
    let a = [c, (1.0 - alpha) / a0];

    // Odd reflection long enough for the start-up transient to die out.
    let decay = 1.0 / (1.0 - libm::sqrt(a[1])).max(1e-12);
    let pad = ((8.0 * decay) as usize).max(6).min(series.len() - 1);
    let n = series.len();
    let mut x = Vec::with_capacity(n + 2 * pad);
    x.extend((1..=pad).rev().map(|i| 2.0 * series[0] - series[i]));
    x.extend_from_slice(series);
    x.extend((1..=pad).map(|i| 2.0 * series[n - 1] - series[n - 1 - i]));

    let pass = |x: &mut Vec<f64>| {
        let x0 = x[0];
        let mut z2 = (b[2] - a[1]) * x0;
        let mut z1 = (b[1] - a[0]) * x0 + z2;
        for v in x.iter_mut() {
            let input = *v;
            let y = b[0] * input + z1;
            z1 = b[1] * input - a[0] * y + z2;
            z2 = b[2] * input - a[1] * y;
            *v = y;
        }
    };
    pass(&mut x);
    x.reverse();
    pass(&mut x);
    x.reverse();
    Ok(x[pad..pad + n].to_vec())
}

/// Summary statistics of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub duration_s: f64,
    pub engagements: usize,
    pub disengagements: usize,
    pub min_clutch_dwell_s: Option<f64>,
    pub soc_start: f64,
    pub soc_end: f64,
    /// Mean cadence over released samples where the cadence loop is active,
    /// skipping the first second after each release.
    pub series_cadence_rpm: Option<f64>,
    pub kappa_min: Option<f64>,
    pub kappa_max: Option<f64>,
    pub motor_saturations: usize,
    pub generator_saturations: usize,
    pub energy_error: f64,
    pub max_lock_violation_radps: f64,
}

pub fn summarize(log: &SimLog, params: &BikeParameters) -> RunSummary {
    let count = |t: ClutchTransition| log.clutch_events().filter(|e| e.transition == t).count();
    let mut released_at: Option<f64> = None;
    let (mut cadence_sum, mut cadence_n) = (0.0, 0usize);
    let mut kappa_min: Option<f64> = None;
    let mut kappa_max: Option<f64> = None;
    let mut lock = 0.0f64;
    for (k, r) in log.records.iter().enumerate() {
        lock = lock.max(params.chain_ratio * r.pedal_speed_radps - r.wheel_speed_radps);
        if r.engaged {
            released_at = None;
            continue;
        }
        let t0 = *released_at.get_or_insert(r.time_s);
        let branch = log.controller.get(k).and_then(|c| c.branch);
        if r.time_s - t0 >= 1.0 && branch == Some(Branch::Cadence) {
            cadence_sum += r.pedal_speed_radps;
            cadence_n += 1;
        }
        if let Some(kappa) = r.kappa {
            kappa_min = Some(kappa_min.map_or(kappa, |m| m.min(kappa)));
            kappa_max = Some(kappa_max.map_or(kappa, |m| m.max(kappa)));
        }
    }
    let saturations = |motor: bool| {
        log.events
            .iter()
            .filter(|e| match e {
                SimEvent::MotorSaturation { active, .. } => motor && *active,
                SimEvent::GeneratorSaturation { active, .. } => !motor && *active,
                _ => false,
            })
            .count()
    };
    RunSummary {
        duration_s: log.records.last().map_or(0.0, |r| r.time_s),
        engagements: count(ClutchTransition::Engaged),
        disengagements: count(ClutchTransition::Disengaged),
        min_clutch_dwell_s: log.min_clutch_dwell_s(),
        soc_start: log.records.first().map_or(0.0, |r| r.soc),
        soc_end: log.records.last().map_or(0.0, |r| r.soc),
        series_cadence_rpm: (cadence_n > 0)
            .then(|| crate::params::radps_to_rpm(cadence_sum / cadence_n as f64)),
        kappa_min,
        kappa_max,
        motor_saturations: saturations(true),
        generator_saturations: saturations(false),
        energy_error: log.energy.relative_error(),
        max_lock_violation_radps: lock,
    }
}

/// Records with `t0 <= t <= t1`.
pub fn window(records: &[LogRecord], t0: f64, t1: f64) -> &[LogRecord] {
    let start = records.partition_point(|r| r.time_s < t0);
    let end = records.partition_point(|r| r.time_s <= t1);
    &records[start..end.max(start)]
}

/// Mean motor power and mean absorbed generator power over released samples
/// of a window.
pub fn power_balance(records: &[LogRecord]) -> Option<(f64, f64)> {
    let (mut pm, mut pg, mut n) = (0.0, 0.0, 0usize);
    for r in records.iter().filter(|r| !r.engaged) {
        pm += r.motor_power_w;
        pg += r.generator_power_w;
        n += 1;
    }
    (n > 0).then(|| (pm / n as f64, pg / n as f64))
}

/// Ratio of summed motor torque to summed chain-scaled rider torque over
/// released samples from `from_s` on.
pub fn steady_kappa(log: &SimLog, from_s: f64) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for (r, c) in log.records.iter().zip(&log.controller) {
        if r.time_s < from_s || r.engaged {
            continue;
        }
        if let Some(x) = c.scaled_rider_torque_nm {
            num += r.motor_torque_nm;
            den += x;
        }
    }
    (den.abs() > 0.0).then(|| num / den)
}

/// Chain torque a massless pedal shaft would transmit for the logged sample.
pub fn quasi_static_chain_torque(record: &LogRecord, params: &BikeParameters) -> f64 {
    chain_torque(record.human_torque_nm, record.generator_torque_nm, params.chain_ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{rpm_to_radps, RatioPolicy};
    use crate::rider::RiderPhase;
    use alloc::vec;

    fn coast_scenario(v0: f64, seconds: f64) -> Scenario {
        let mut s = Scenario::new(
            BikeParameters::prototype(70.0),
            CoastdownCoeffs::new(3.0, 0.0, 0.0),
            RiderScript::new(vec![RiderPhase::coast(seconds)]).unwrap(),
            ControllerConfig::None,
        );
        s.initial_state.speed_mps = v0;
        s.initial_state.clutch_engaged = false;
        s
    }

    #[test]
    fn unpowered_coast_matches_closed_form() {
        // constant resistance only: v(t) = v0 - A t / M
        let s = coast_scenario(5.0, 10.0);
        let log = run_scenario(&s).unwrap();
        let m = s.params.total_mass_kg();
        for w in log.records.windows(2) {
            assert!(w[1].speed_mps < w[0].speed_mps);
        }
        for r in &log.records {
            let expected = 5.0 - 3.0 * r.time_s / m;
            assert!((r.speed_mps - expected).abs() < 1e-9, "{} {}", r.speed_mps, expected);
        }
        assert_eq!(log.records.len(), 1001);
    }

    #[test]
    fn invalid_scenarios() {
        let mut s = coast_scenario(1.0, 1.0);
        s.control_period_s = 0.0105;
        assert!(s.validate().is_err());
        let mut s = coast_scenario(1.0, 1.0);
        s.duration_s = 2.0;
        assert!(s.validate().is_err());
        let mut s = coast_scenario(1.0, 1.0);
        s.params.generator_inertia_kgm2 = 0.0;
        assert!(s.validate().is_err());
        let mut s = coast_scenario(1.0, 1.0);
        s.initial_state.pedal_speed_radps = 10.0;
        assert!(s.validate().is_err());
        let mut s = coast_scenario(1.0, 1.0);
        s.initial_state.clutch_engaged = true;
        assert!(s.validate().is_err());
    }

    #[test]
    fn soc_update_examples() {
        let b = Battery::default();
        assert_eq!(soc_update(0.5, 100.0, 100.0, &b, 0.01).unwrap(), (0.5, false));
        let (s1, _) = soc_update(0.5, 360.0, 0.0, &b, 10.0).unwrap();
        assert!((s1 - (0.5 - 3600.0 / (3600.0 * 400.0))).abs() < 1e-15);
        let (s2, _) = soc_update(0.5, 360.0, 0.0, &b, 20.0).unwrap();
        assert!(((0.5 - s2) - 2.0 * (0.5 - s1)).abs() < 1e-15);
        assert_eq!(soc_update(0.0, 10.0, 0.0, &b, 1.0).unwrap(), (0.0, true));
    }

    #[test]
    fn reference_decays_with_virtual_time_constant() {
        let records: Vec<LogRecord> = (0..=1000)
            .map(|k| LogRecord {
                time_s: k as f64 * 0.01,
                speed_mps: 4.0,
                pedal_speed_radps: 0.0,
                wheel_speed_radps: 0.0,
                engaged: false,
                human_torque_nm: 0.0,
                motor_torque_nm: 0.0,
                generator_torque_nm: 0.0,
                chain_torque_nm: 0.0,
                ratio: 2.0,
                kappa: None,
                motor_power_w: 0.0,
                generator_power_w: 0.0,
                soc: 0.5,
            })
            .collect();
        let w = virtual_model_reference(&records, 60.0, 2.0, 0.33).unwrap();
        let tau = 30.0;
        for (r, w) in records.iter().zip(&w) {
            let exact = 4.0 * libm::exp(-r.time_s / tau);
            assert!((w.unwrap() - exact).abs() < 1e-6);
        }
        let engaged: Vec<LogRecord> = records
            .iter()
            .map(|r| LogRecord { engaged: true, ..*r })
            .collect();
        assert_eq!(virtual_model_reference(&engaged, 60.0, 2.0, 0.33), Err(Error::NoDisengagement));
    }

    #[test]
    fn notch_removes_ripple_and_keeps_dc() {
        let dt = 0.01;
        let cadence = rpm_to_radps(60.0);
        let n = 3000;
        let dc = vec![3.0; n];
        let out = notch_postprocess(&dc, dt, cadence, DEFAULT_NOTCH_Q).unwrap();
        assert!(out.iter().all(|y| (y - 3.0).abs() < 1e-9));
        let sine: Vec<f64> = (0..n).map(|k| libm::sin(2.0 * cadence * k as f64 * dt)).collect();
        let out = notch_postprocess(&sine, dt, cadence, DEFAULT_NOTCH_Q).unwrap();
        let peak = out[500..n - 500].iter().fold(0.0f64, |m, y| m.max(y.abs()));
        assert!(20.0 * libm::log10(peak) < -40.0, "{peak}");
        assert!(matches!(
            notch_postprocess(&sine, 0.1, 20.0, 5.0),
            Err(Error::NotchAboveNyquist { .. })
        ));
    }

    #[test]
    fn deterministic_runs() {
        let mut s = Scenario::new(
            BikeParameters::prototype(70.0),
            CoastdownCoeffs::reference_plant(),
            RiderScript::new(vec![RiderPhase::pedal(6.0, 25.0)]).unwrap(),
            ControllerConfig::VirtualChain {
                ratio: RatioPolicy::ConstantCadence {
                    cadence_radps: rpm_to_radps(20.0),
                },
                gains: Default::default(),
                torque_sensor: false,
            },
        );
        s.noise = Some(SensorNoise {
            pedal_sigma_radps: 0.01,
            wheel_sigma_radps: 0.01,
            seed: 7,
        });
        assert_eq!(run_scenario(&s).unwrap(), run_scenario(&s).unwrap());
    }
}
