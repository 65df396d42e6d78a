//! Shared domain types: bike parameters, coast-down coefficients, vehicle
//! state, machine commands and the virtual-bike specification.
//!
//! All quantities are SI. Forward motion is positive, `T_h > 0` propels the
//! pedals, the generator torque is negative while it absorbs power and brake
//! torque is never positive.

use alloc::vec::Vec;
use core::fmt;

use crate::error::{positive, Error, Result};

/// Tolerance on the pedal/wheel speed lock, in rad/s.
pub const SPEED_EPS: f64 = 1e-6;

/// Tolerance on the chain reaction torque of engaged samples, in Nm.
pub const TORQUE_EPS: f64 = 1e-9;

/// Physical constants of the vehicle and its two electrical machines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BikeParameters {
    pub bike_mass_kg: f64,
    pub rider_mass_kg: f64,
    pub wheel_radius_m: f64,
    /// Mechanical chain ratio, `wheel speed = chain_ratio * pedal speed`.
    pub chain_ratio: f64,
    pub motor_torque_constant_nm_per_a: f64,
    pub generator_torque_constant_nm_per_a: f64,
    /// Pedal-side inertia seen by the generator. Zero is the massless-pedal
    /// simplification.
    pub generator_inertia_kgm2: f64,
    pub motor_torque_limit_nm: f64,
    pub motor_power_limit_w: f64,
    pub generator_torque_limit_nm: f64,
}

impl BikeParameters {
    /// Prototype bike (25 kg, 0.33 m wheel, chain ratio 1.80, machine constants
    /// 1.69 and 10.7 Nm/A) with the given rider mass.
    ///
    /// Pedal inertia and machine limits are not published for the prototype;
    /// the values used here are simulation defaults.
    pub fn prototype(rider_mass_kg: f64) -> Self {
        Self {
            bike_mass_kg: 25.0,
            rider_mass_kg,
            wheel_radius_m: 0.33,
            chain_ratio: 1.80,
            motor_torque_constant_nm_per_a: 1.69,
            generator_torque_constant_nm_per_a: 10.7,
            generator_inertia_kgm2: 0.5,
            motor_torque_limit_nm: 40.0,
            motor_power_limit_w: 500.0,
            generator_torque_limit_nm: 60.0,
        }
    }

    pub fn total_mass_kg(&self) -> f64 {
        self.bike_mass_kg + self.rider_mass_kg
    }

    /// Wheel angular speed for a longitudinal speed.
    pub fn wheel_speed(&self, speed_mps: f64) -> f64 {
        speed_mps / self.wheel_radius_m
    }

    /// Mass seen at the wheel when the chain locks the pedals to it.
    pub fn engaged_mass_kg(&self) -> f64 {
        let reduction = self.chain_ratio * self.wheel_radius_m;
        self.total_mass_kg() + self.generator_inertia_kgm2 / (reduction * reduction)
    }

    pub fn validate(&self) -> ValidationReport {
        validate_parameters(self)
    }

    /// Clamps a motor torque to the torque limit, then to the power limit at
    /// the given wheel speed.
    pub fn saturate_motor_torque(&self, torque_nm: f64, wheel_speed_radps: f64) -> f64 {
        let limit = self.motor_torque_limit_nm;
        let mut torque = torque_nm.clamp(-limit, limit);
        let power = torque * wheel_speed_radps;
        if power.abs() > self.motor_power_limit_w {
            torque = self.motor_power_limit_w / wheel_speed_radps.abs() * torque.signum();
        }
        torque
    }

    pub fn saturate_generator_torque(&self, torque_nm: f64) -> f64 {
        let limit = self.generator_torque_limit_nm;
        torque_nm.clamp(-limit, limit)
    }
}

/// One violated parameter invariant.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: &'static str,
    pub reason: &'static str,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

/// Outcome of [`validate_parameters`]; passes iff no invariant is violated.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn names(&self, field: &str) -> bool {
        self.violations.iter().any(|v| v.field == field)
    }

    pub fn into_result(self) -> Result<()> {
        match self.violations.first() {
            None => Ok(()),
            Some(v) => Err(Error::InvalidParameter {
                name: v.field,
                reason: v.reason,
            }),
        }
    }
}

pub fn validate_parameters(p: &BikeParameters) -> ValidationReport {
    let strictly_positive = [
        ("bike_mass_kg", p.bike_mass_kg),
        ("rider_mass_kg", p.rider_mass_kg),
        ("wheel_radius_m", p.wheel_radius_m),
        ("chain_ratio", p.chain_ratio),
        (
            "motor_torque_constant_nm_per_a",
            p.motor_torque_constant_nm_per_a,
        ),
        (
            "generator_torque_constant_nm_per_a",
            p.generator_torque_constant_nm_per_a,
        ),
        ("motor_torque_limit_nm", p.motor_torque_limit_nm),
        ("motor_power_limit_w", p.motor_power_limit_w),
        ("generator_torque_limit_nm", p.generator_torque_limit_nm),
    ];
    let mut violations: Vec<Violation> = strictly_positive
        .iter()
        .filter(|(_, value)| !(value.is_finite() && *value > 0.0))
        .map(|(field, _)| Violation {
            field,
            reason: "must be finite and strictly positive",
        })
        .collect();
    if !(p.generator_inertia_kgm2.is_finite() && p.generator_inertia_kgm2 >= 0.0) {
        violations.push(Violation {
            field: "generator_inertia_kgm2",
            reason: "must be finite and non-negative",
        });
    }
    ValidationReport { violations }
}

/// Machine torque from its phase current: `torque = constant * current`.
pub fn torque_from_current(constant_nm_per_a: f64, current_a: f64) -> Result<f64> {
    Ok(positive("torque_constant", constant_nm_per_a)? * current_a)
}

pub fn current_from_torque(constant_nm_per_a: f64, torque_nm: f64) -> Result<f64> {
    Ok(torque_nm / positive("torque_constant", constant_nm_per_a)?)
}

/// Coast-down resistance `F(v) = C v^2 + B v + A`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoastdownCoeffs {
    /// C, N/(m/s)^2
    pub quadratic_n_per_mps2: f64,
    /// B, N/(m/s)
    pub linear_n_per_mps: f64,
    /// A, N
    pub constant_n: f64,
}

impl CoastdownCoeffs {
    pub fn new(constant_n: f64, linear_n_per_mps: f64, quadratic_n_per_mps2: f64) -> Self {
        Self {
            quadratic_n_per_mps2,
            linear_n_per_mps,
            constant_n,
        }
    }

    /// Default plant used by the shipped scenarios (A = 4 N, B = 0.3, C = 0.4).
    pub fn reference_plant() -> Self {
        Self::new(4.0, 0.3, 0.4)
    }

    /// Purely viscous resistance `F(v) = beta v`.
    pub fn viscous(beta_n_per_mps: f64) -> Self {
        Self::new(0.0, beta_n_per_mps, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [
            ("quadratic_n_per_mps2", self.quadratic_n_per_mps2),
            ("linear_n_per_mps", self.linear_n_per_mps),
            ("constant_n", self.constant_n),
        ] {
            crate::error::non_negative(name, value)?;
        }
        Ok(())
    }

    /// Polynomial value without the sign check of
    /// [`crate::powertrain::coastdown_force`].
    #[inline]
    pub fn eval(&self, speed_mps: f64) -> f64 {
        (self.quadratic_n_per_mps2 * speed_mps + self.linear_n_per_mps) * speed_mps
            + self.constant_n
    }

    /// Slope of the resistance at `speed_mps`.
    #[inline]
    pub fn slope(&self, speed_mps: f64) -> f64 {
        2.0 * self.quadratic_n_per_mps2 * speed_mps + self.linear_n_per_mps
    }
}

/// Continuous vehicle states plus the freewheel status.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub time_s: f64,
    pub speed_mps: f64,
    pub pedal_speed_radps: f64,
    pub clutch_engaged: bool,
    pub soc_fraction: f64,
}

impl VehicleState {
    pub fn at_rest(soc_fraction: f64) -> Self {
        Self {
            time_s: 0.0,
            speed_mps: 0.0,
            pedal_speed_radps: 0.0,
            clutch_engaged: true,
            soc_fraction,
        }
    }

    pub fn wheel_speed(&self, params: &BikeParameters) -> f64 {
        params.wheel_speed(self.speed_mps)
    }

    /// `chain_ratio * pedal speed - wheel speed`; never above `SPEED_EPS`.
    pub fn lock_gap(&self, params: &BikeParameters) -> f64 {
        params.chain_ratio * self.pedal_speed_radps - self.wheel_speed(params)
    }

    pub fn is_finite(&self) -> bool {
        self.speed_mps.is_finite()
            && self.pedal_speed_radps.is_finite()
            && self.soc_fraction.is_finite()
    }
}

/// Machine currents and brake torque requested for one control period.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ControlCommand {
    pub motor_current_a: f64,
    pub generator_current_a: f64,
    pub brake_torque_nm: f64,
}

impl ControlCommand {
    pub fn from_torques(params: &BikeParameters, motor_nm: f64, generator_nm: f64) -> Self {
        Self {
            motor_current_a: motor_nm / params.motor_torque_constant_nm_per_a,
            generator_current_a: generator_nm / params.generator_torque_constant_nm_per_a,
            brake_torque_nm: 0.0,
        }
    }

    pub fn motor_torque(&self, params: &BikeParameters) -> f64 {
        self.motor_current_a * params.motor_torque_constant_nm_per_a
    }

    pub fn generator_torque(&self, params: &BikeParameters) -> f64 {
        self.generator_current_a * params.generator_torque_constant_nm_per_a
    }
}

/// How the virtual-chain ratio is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RatioPolicy {
    /// Keep the pedals at a constant cadence, rad/s.
    ConstantCadence { cadence_radps: f64 },
    /// Constant ratio between wheel and pedal speed.
    Fixed { ratio: f64 },
}

impl RatioPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RatioPolicy::ConstantCadence { cadence_radps } => {
                positive("cadence_reference", cadence_radps).map(|_| ())
            }
            RatioPolicy::Fixed { ratio } => positive("virtual_ratio", ratio).map(|_| ()),
        }
    }
}

/// Desired first-order vehicle to emulate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualBikeSpec {
    pub virtual_mass_kg: f64,
    pub virtual_resistance_n_per_mps: f64,
    pub ratio: RatioPolicy,
}

impl VirtualBikeSpec {
    pub fn validate(&self) -> Result<()> {
        positive("virtual_mass_kg", self.virtual_mass_kg)?;
        positive(
            "virtual_resistance_n_per_mps",
            self.virtual_resistance_n_per_mps,
        )?;
        self.ratio.validate()
    }
}

pub fn rpm_to_radps(rpm: f64) -> f64 {
    rpm * core::f64::consts::PI / 30.0
}

pub fn radps_to_rpm(radps: f64) -> f64 {
    radps * 30.0 / core::f64::consts::PI
}

pub fn kmh_to_mps(kmh: f64) -> f64 {
    kmh / 3.6
}

pub fn mps_to_kmh(mps: f64) -> f64 {
    mps * 3.6
}
