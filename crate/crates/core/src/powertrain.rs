//! Longitudinal plant with a freewheel between chain and rear wheel.
//!
//! The freewheel is an uncontrollable clutch: it locks pedals and wheel
//! (`wheel speed = chain_ratio * pedal speed`) while the chain transmits a
//! positive torque and releases them otherwise. With the chain engaged the
//! bike is a parallel hybrid, with the chain released it is a series one and
//! the pedals are loaded by the generator only.

use crate::error::{Error, Result};
use crate::params::{BikeParameters, CoastdownCoeffs, VehicleState, SPEED_EPS};

/// Torques applied to the plant during one integration step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PlantInputs {
    pub human_torque_nm: f64,
    /// Motor torque after saturation.
    pub motor_torque_nm: f64,
    pub generator_torque_nm: f64,
    /// Brake torque, `<= 0`.
    pub brake_torque_nm: f64,
}

impl PlantInputs {
    pub fn is_finite(&self) -> bool {
        self.human_torque_nm.is_finite()
            && self.motor_torque_nm.is_finite()
            && self.generator_torque_nm.is_finite()
            && self.brake_torque_nm.is_finite()
    }

    /// Net torque on the pedal shaft, `T_h + T_g`.
    pub fn pedal_torque(&self) -> f64 {
        self.human_torque_nm + self.generator_torque_nm
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StateDerivative {
    pub dv_dt_mps2: f64,
    pub dpedal_dt_radps2: f64,
}

/// Released-chain derivative. `algebraic_pedal` is set when the pedal shaft
/// is massless and its torques do not balance; the pedal speed is then
/// imposed by the generator loop rather than integrated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisengagedDerivative {
    pub derivative: StateDerivative,
    pub algebraic_pedal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClutchTransition {
    Engaged,
    Disengaged,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClutchEvent {
    pub time_s: f64,
    pub transition: ClutchTransition,
    pub speed_mps: f64,
    pub pedal_speed_radps: f64,
}

/// Work done on the vehicle over one step, in joules. Machine and human
/// terms are signed work on the mechanism; the loss terms are non-negative.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepEnergy {
    pub human_j: f64,
    pub generator_j: f64,
    pub motor_j: f64,
    pub brake_j: f64,
    pub resistance_j: f64,
    /// Kinetic energy lost when the freewheel catches the pedals.
    pub impact_j: f64,
    /// Kinetic energy removed by holding the vehicle at standstill.
    pub standstill_j: f64,
}

impl StepEnergy {
    pub fn accumulate(&mut self, other: &StepEnergy) {
        self.human_j += other.human_j;
        self.generator_j += other.generator_j;
        self.motor_j += other.motor_j;
        self.brake_j += other.brake_j;
        self.resistance_j += other.resistance_j;
        self.impact_j += other.impact_j;
        self.standstill_j += other.standstill_j;
    }
}

/// Clutch state after checking the reaction torque for the given inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClutchResolution {
    pub state: VehicleState,
    /// Reaction torque carried by the chain, zero while released.
    pub chain_torque_nm: f64,
    pub event: Option<ClutchEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOptions {
    /// When false, a pedal catching up with the wheel is held at the lock
    /// speed without engaging the clutch.
    pub allow_engagement: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            allow_engagement: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub state: VehicleState,
    /// Chain reaction at the start of the step, after clutch resolution.
    pub chain_torque_nm: f64,
    pub released: Option<ClutchEvent>,
    pub engaged: Option<ClutchEvent>,
    pub energy: StepEnergy,
}

impl StepOutcome {
    pub fn events(&self) -> impl Iterator<Item = ClutchEvent> {
        self.released.into_iter().chain(self.engaged)
    }
}

pub fn coastdown_force(coeffs: &CoastdownCoeffs, speed_mps: f64) -> Result<f64> {
    if speed_mps < 0.0 || speed_mps.is_nan() {
        return Err(Error::NegativeSpeed(speed_mps));
    }
    Ok(coeffs.eval(speed_mps))
}

pub fn clutch_status(
    wheel_speed_radps: f64,
    pedal_speed_radps: f64,
    chain_torque_nm: f64,
    chain_ratio: f64,
) -> bool {
    (wheel_speed_radps - chain_ratio * pedal_speed_radps).abs() <= SPEED_EPS
        && chain_torque_nm > 0.0
}

/// Chain torque for a massless pedal shaft, `(T_h + T_g) / chain_ratio`.
pub fn chain_torque(human_torque_nm: f64, generator_torque_nm: f64, chain_ratio: f64) -> f64 {
    (human_torque_nm + generator_torque_nm) / chain_ratio
}

/// Wheel-side balance shared by both modes: returns the net force and the
/// dissipated powers `(force, brake_power, resistance_power)`.
///
/// At standstill the resistance and brake hold the bike up to their capacity,
/// so it never rolls backwards.
fn wheel_balance(
    speed_mps: f64,
    drive_force_n: f64,
    brake_torque_nm: f64,
    coeffs: &CoastdownCoeffs,
    wheel_radius_m: f64,
) -> (f64, f64, f64) {
    if speed_mps > 0.0 {
        let resistance = coeffs.eval(speed_mps);
        let brake_force = brake_torque_nm / wheel_radius_m;
        (
            drive_force_n + brake_force - resistance,
            brake_force * speed_mps,
            resistance * speed_mps,
        )
    } else {
        let capacity = coeffs.eval(0.0) + brake_torque_nm.abs() / wheel_radius_m;
        ((drive_force_n - capacity).max(0.0), 0.0, 0.0)
    }
}

pub fn derivatives_disengaged(
    state: &VehicleState,
    inputs: &PlantInputs,
    params: &BikeParameters,
    coeffs: &CoastdownCoeffs,
) -> DisengagedDerivative {
    let (force, _, _) = wheel_balance(
        state.speed_mps,
        inputs.motor_torque_nm / params.wheel_radius_m,
        inputs.brake_torque_nm,
        coeffs,
        params.wheel_radius_m,
    );
    let pedal_torque = inputs.pedal_torque();
    let inertia = params.generator_inertia_kgm2;
    let (dpedal, algebraic) = if inertia > 0.0 {
        (pedal_torque / inertia, false)
    } else {
        (0.0, pedal_torque != 0.0)
    };
    DisengagedDerivative {
        derivative: StateDerivative {
            dv_dt_mps2: force / params.total_mass_kg(),
            dpedal_dt_radps2: dpedal,
        },
        algebraic_pedal: algebraic,
    }
}

/// Locked-chain derivative and the chain reaction torque implied by the
/// pedal torque balance.
pub fn derivatives_engaged(
    state: &VehicleState,
    inputs: &PlantInputs,
    params: &BikeParameters,
    coeffs: &CoastdownCoeffs,
) -> Result<(StateDerivative, f64)> {
    let mismatch = state.lock_gap(params);
    if mismatch.abs() > SPEED_EPS {
        return Err(Error::NotLocked {
            mismatch_radps: mismatch,
        });
    }
    Ok(engaged_dynamics(state.speed_mps, inputs, params, coeffs))
}

fn engaged_dynamics(
    speed_mps: f64,
    inputs: &PlantInputs,
    params: &BikeParameters,
    coeffs: &CoastdownCoeffs,
) -> (StateDerivative, f64) {
    let reduction = params.chain_ratio * params.wheel_radius_m;
    let drive = inputs.motor_torque_nm / params.wheel_radius_m + inputs.pedal_torque() / reduction;
    let (force, _, _) = wheel_balance(
        speed_mps,
        drive,
        inputs.brake_torque_nm,
        coeffs,
        params.wheel_radius_m,
    );
    let dv = force / params.engaged_mass_kg();
    let dpedal = dv / reduction;
    let reaction =
        (inputs.pedal_torque() - params.generator_inertia_kgm2 * dpedal) / params.chain_ratio;
    (
        StateDerivative {
            dv_dt_mps2: dv,
            dpedal_dt_radps2: dpedal,
        },
        reaction,
    )
}

/// Kinetic energy of vehicle and pedal shaft.
pub fn kinetic_energy(state: &VehicleState, params: &BikeParameters) -> f64 {
    0.5 * params.total_mass_kg() * state.speed_mps * state.speed_mps
        + 0.5 * params.generator_inertia_kgm2 * state.pedal_speed_radps * state.pedal_speed_radps
}

/// Releases the chain when the inputs would make it pull backwards.
pub fn resolve_clutch(
    state: &VehicleState,
    inputs: &PlantInputs,
    params: &BikeParameters,
    coeffs: &CoastdownCoeffs,
) -> ClutchResolution {
    if !state.clutch_engaged {
        return ClutchResolution {
            state: *state,
            chain_torque_nm: 0.0,
            event: None,
        };
    }
    let (_, reaction) = engaged_dynamics(state.speed_mps, inputs, params, coeffs);
    if reaction > 0.0 {
        ClutchResolution {
            state: *state,
            chain_torque_nm: reaction,
            event: None,
        }
    } else {
        let mut released = *state;
        released.clutch_engaged = false;
        ClutchResolution {
            state: released,
            chain_torque_nm: 0.0,
            event: Some(ClutchEvent {
                time_s: state.time_s,
                transition: ClutchTransition::Disengaged,
                speed_mps: state.speed_mps,
                pedal_speed_radps: state.pedal_speed_radps,
            }),
        }
    }
}

// Accumulator layout shared by both modes.
const HUMAN: usize = 0;
const GENERATOR: usize = 1;
const MOTOR: usize = 2;
const BRAKE: usize = 3;
const RESISTANCE: usize = 4;

fn rk4<const N: usize>(y: &[f64; N], dt: f64, f: impl Fn(&[f64; N]) -> [f64; N]) -> [f64; N] {
    let shifted = |base: &[f64; N], k: &[f64; N], h: f64| {
        let mut out = *base;
        for (o, ki) in out.iter_mut().zip(k) {
            *o += h * ki;
        }
        out
    };
    let k1 = f(y);
    let k2 = f(&shifted(y, &k1, 0.5 * dt));
    let k3 = f(&shifted(y, &k2, 0.5 * dt));
    let k4 = f(&shifted(y, &k3, dt));
    let mut out = *y;
    for i in 0..N {
        out[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

fn power_terms(
    speed_mps: f64,
    pedal_speed: f64,
    inputs: &PlantInputs,
    params: &BikeParameters,
    brake_power: f64,
    resistance_power: f64,
) -> [f64; 5] {
    let wheel = params.wheel_speed(speed_mps.max(0.0));
    let mut p = [0.0; 5];
    p[HUMAN] = inputs.human_torque_nm * pedal_speed;
    p[GENERATOR] = inputs.generator_torque_nm * pedal_speed;
    p[MOTOR] = inputs.motor_torque_nm * wheel;
    p[BRAKE] = brake_power;
    p[RESISTANCE] = resistance_power;
    p
}

fn integrate_disengaged(
    state: &VehicleState,
    inputs: &PlantInputs,
    params: &BikeParameters,
    coeffs: &CoastdownCoeffs,
    dt: f64,
) -> (f64, f64, [f64; 5]) {
    let mass = params.total_mass_kg();
    let inertia = params.generator_inertia_kgm2;
    let radius = params.wheel_radius_m;
    let rhs = |y: &[f64; 7]| {
        let (force, brake_power, resistance_power) = wheel_balance(
            y[0],
            inputs.motor_torque_nm / radius,
            inputs.brake_torque_nm,
            coeffs,
            radius,
        );
        let dpedal = if inertia > 0.0 {
            inputs.pedal_torque() / inertia
        } else {
            0.0
        };
        let p = power_terms(y[0], y[1], inputs, params, brake_power, resistance_power);
        [force / mass, dpedal, p[0], p[1], p[2], p[3], p[4]]
    };
    let y0 = [
        state.speed_mps,
        state.pedal_speed_radps,
        0.0,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    let y = rk4(&y0, dt, rhs);
    (y[0], y[1], [y[2], y[3], y[4], y[5], y[6]])
}

fn integrate_engaged(
    state: &VehicleState,
    inputs: &PlantInputs,
    params: &BikeParameters,
    coeffs: &CoastdownCoeffs,
    dt: f64,
) -> (f64, [f64; 5]) {
    let reduction = params.chain_ratio * params.wheel_radius_m;
    let mass = params.engaged_mass_kg();
    let radius = params.wheel_radius_m;
    let rhs = |y: &[f64; 6]| {
        let drive = inputs.motor_torque_nm / radius + inputs.pedal_torque() / reduction;
        let (force, brake_power, resistance_power) =
            wheel_balance(y[0], drive, inputs.brake_torque_nm, coeffs, radius);
        let p = power_terms(
            y[0],
            y[0] / reduction,
            inputs,
            params,
            brake_power,
            resistance_power,
        );
        [force / mass, p[0], p[1], p[2], p[3], p[4]]
    };
    let y0 = [state.speed_mps, 0.0, 0.0, 0.0, 0.0, 0.0];
    let y = rk4(&y0, dt, rhs);
    (y[0], [y[1], y[2], y[3], y[4], y[5]])
}

pub fn step_hybrid(
    state: &VehicleState,
    inputs: &PlantInputs,
    params: &BikeParameters,
    coeffs: &CoastdownCoeffs,
    dt_s: f64,
) -> Result<StepOutcome> {
    step_hybrid_with(state, inputs, params, coeffs, dt_s, StepOptions::default())
}

/// Advances the plant by one fixed RK4 step in the current clutch mode and
/// resolves clutch transitions at the step boundaries.
pub fn step_hybrid_with(
    state: &VehicleState,
    inputs: &PlantInputs,
    params: &BikeParameters,
    coeffs: &CoastdownCoeffs,
    dt_s: f64,
    options: StepOptions,
) -> Result<StepOutcome> {
    if !(dt_s.is_finite() && dt_s > 0.0) {
        return Err(Error::InvalidParameter {
            name: "dt_s",
            reason: "must be finite and strictly positive",
        });
    }
    if !inputs.is_finite() || !state.is_finite() {
        return Err(Error::NumericalFault {
            time_s: state.time_s,
        });
    }

    let resolution = resolve_clutch(state, inputs, params, coeffs);
    let start = resolution.state;
    let reduction = params.chain_ratio * params.wheel_radius_m;

    let (mut speed, mut pedal, work) = if start.clutch_engaged {
        let (v, work) = integrate_engaged(&start, inputs, params, coeffs, dt_s);
        (v, v / reduction, work)
    } else {
        integrate_disengaged(&start, inputs, params, coeffs, dt_s)
    };

    let mut energy = StepEnergy {
        human_j: work[HUMAN],
        generator_j: work[GENERATOR],
        motor_j: work[MOTOR],
        brake_j: work[BRAKE],
        resistance_j: work[RESISTANCE],
        impact_j: 0.0,
        standstill_j: 0.0,
    };

    let mass = params.total_mass_kg();
    let inertia = params.generator_inertia_kgm2;
    let mut engaged = start.clutch_engaged;

    if speed < 0.0 {
        let moving_mass = if engaged {
            params.engaged_mass_kg()
        } else {
            mass
        };
        energy.standstill_j += 0.5 * moving_mass * speed * speed;
        speed = 0.0;
    }

    let time = start.time_s + dt_s;
    let mut engage_event = None;
    if !engaged && params.chain_ratio * pedal > params.wheel_speed(speed) {
        // The freewheel catches the pedals: inelastic lock.
        let before = 0.5 * mass * speed * speed + 0.5 * inertia * pedal * pedal;
        let locked_speed = (mass * speed + inertia * pedal / reduction) / params.engaged_mass_kg();
        speed = locked_speed;
        pedal = locked_speed / reduction;
        energy.impact_j += (before - 0.5 * params.engaged_mass_kg() * speed * speed).max(0.0);
        if options.allow_engagement {
            let (_, reaction) = engaged_dynamics(speed, inputs, params, coeffs);
            if reaction > 0.0 {
                engaged = true;
                engage_event = Some(ClutchEvent {
                    time_s: time,
                    transition: ClutchTransition::Engaged,
                    speed_mps: speed,
                    pedal_speed_radps: pedal,
                });
            }
        }
    }
    if engaged {
        pedal = speed / reduction;
    }

    let next = VehicleState {
        time_s: time,
        speed_mps: speed,
        pedal_speed_radps: pedal,
        clutch_engaged: engaged,
        soc_fraction: start.soc_fraction,
    };
    let energy_finite = [
        energy.human_j,
        energy.generator_j,
        energy.motor_j,
        energy.brake_j,
        energy.resistance_j,
        energy.impact_j,
        energy.standstill_j,
    ]
    .iter()
    .all(|e| e.is_finite());
    if !next.is_finite() || !resolution.chain_torque_nm.is_finite() || !energy_finite {
        return Err(Error::NumericalFault { time_s: time });
    }
    Ok(StepOutcome {
        state: next,
        chain_torque_nm: resolution.chain_torque_nm,
        released: resolution.event,
        engaged: engage_event,
        energy,
    })
}
