//! Virtual-chain and virtual-bike control laws.
//!
//! Both laws share the generator side: a cadence PI loop and a zero-torque PI
//! loop merged by a min-selector, so the generator only loads the pedals when
//! they reach the cadence reference and otherwise emulates a freewheel. On the
//! motor side the virtual chain commands `T_h / τ_v` while the virtual bike
//! shapes it with the filter `κ(s) = (M s + β) / (M_v s + β_v)`.

use crate::error::{non_negative, positive, Error, Result};
use crate::params::{BikeParameters, RatioPolicy, VirtualBikeSpec};

/// Ratio for the current wheel speed. A constant-cadence policy never asks
/// for a ratio below the mechanical one: the pedals cannot spin faster than
/// the chain allows.
pub fn virtual_ratio(policy: &RatioPolicy, wheel_speed_radps: f64, chain_ratio: f64) -> Result<f64> {
    if wheel_speed_radps < 0.0 || wheel_speed_radps.is_nan() {
        return Err(Error::NegativeSpeed(wheel_speed_radps));
    }
    match *policy {
        RatioPolicy::ConstantCadence { cadence_radps } => {
            positive("cadence_reference", cadence_radps)?;
            Ok((wheel_speed_radps / cadence_radps).max(chain_ratio))
        }
        RatioPolicy::Fixed { ratio } => positive("virtual_ratio", ratio),
    }
}

/// Rider torque seen by the controller. Without a sensor it is the generator
/// reaction, which only holds while the chain is released.
pub fn estimate_rider_torque(
    measured_generator_torque_nm: f64,
    engaged: bool,
    sensor_nm: Option<f64>,
) -> Option<f64> {
    match (sensor_nm, engaged) {
        (Some(t), _) => Some(t),
        (None, false) => Some(-measured_generator_torque_nm),
        (None, true) => None,
    }
}

/// Virtual-chain motor torque `T_h / τ_v` after the motor limits.
pub fn motor_torque_reference_vc(
    rider_torque_nm: f64,
    ratio: f64,
    params: &BikeParameters,
    wheel_speed_radps: f64,
) -> Result<f64> {
    positive("virtual_ratio", ratio)?;
    Ok(params.saturate_motor_torque(rider_torque_nm / ratio, wheel_speed_radps))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Cadence,
    ZeroTorque,
}

/// Gains of the generator loops. Both are torque-equivalent PI controllers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorGains {
    /// Cadence loop, Nm s/rad and Nm/rad.
    pub cadence_kp: f64,
    pub cadence_ki: f64,
    /// Zero-torque loop, dimensionless and 1/s.
    pub zero_kp: f64,
    pub zero_ki: f64,
    /// Back-calculation time constant.
    pub tracking_time_s: f64,
    pub anti_windup: bool,
}

impl Default for GeneratorGains {
    fn default() -> Self {
        Self {
            cadence_kp: 40.0,
            cadence_ki: 80.0,
            zero_kp: 0.2,
            zero_ki: 50.0,
            tracking_time_s: 0.02,
            anti_windup: true,
        }
    }
}

impl GeneratorGains {
    pub fn validate(&self) -> Result<()> {
        non_negative("cadence_kp", self.cadence_kp)?;
        non_negative("cadence_ki", self.cadence_ki)?;
        non_negative("zero_kp", self.zero_kp)?;
        non_negative("zero_ki", self.zero_ki)?;
        positive("tracking_time_s", self.tracking_time_s)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualChainState {
    pub cadence_integral_nm: f64,
    pub zero_integral_nm: f64,
    pub branch: Branch,
    pub ratio: f64,
}

impl VirtualChainState {
    pub fn new(ratio: f64) -> Self {
        Self {
            cadence_integral_nm: 0.0,
            zero_integral_nm: 0.0,
            branch: Branch::ZeroTorque,
            ratio,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.cadence_integral_nm.is_finite() && self.zero_integral_nm.is_finite() && self.ratio.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorCommand {
    /// Torque-equivalent command after saturation.
    pub torque_nm: f64,
    /// Selector output before saturation.
    pub unsaturated_nm: f64,
    pub branch: Branch,
    pub cadence_reference_radps: f64,
    pub cadence_branch_nm: f64,
    pub zero_branch_nm: f64,
}

impl GeneratorCommand {
    pub fn saturated(&self) -> bool {
        self.torque_nm != self.unsaturated_nm
    }
}

/// One control period of the generator min-selector.
///
/// The cadence loop tracks `Ω_w / τ_v`, the zero-torque loop drives the
/// measured generator torque to zero and the smaller (more braking) command
/// wins. With anti-windup both integrators are back-calculated towards the
/// applied output, so the idle branch stays close to the active one.
#[allow(clippy::too_many_arguments)]
pub fn generator_command_vc(
    state: &VirtualChainState,
    gains: &GeneratorGains,
    params: &BikeParameters,
    pedal_speed_radps: f64,
    wheel_speed_radps: f64,
    ratio: f64,
    measured_generator_torque_nm: f64,
    dt_s: f64,
) -> Result<(GeneratorCommand, VirtualChainState)> {
    positive("dt_s", dt_s)?;
    positive("virtual_ratio", ratio)?;
    let reference = wheel_speed_radps / ratio;
    let cadence_error = reference - pedal_speed_radps;
    let zero_error = -measured_generator_torque_nm;

    let cadence_branch = gains.cadence_kp * cadence_error + state.cadence_integral_nm;
    let zero_branch = gains.zero_kp * zero_error + state.zero_integral_nm;
    let (unsaturated, branch) = if cadence_branch < zero_branch {
        (cadence_branch, Branch::Cadence)
    } else {
        (zero_branch, Branch::ZeroTorque)
    };
    let torque = params.saturate_generator_torque(unsaturated);

    let (cadence_track, zero_track) = if gains.anti_windup {
        (
            (torque - cadence_branch) / gains.tracking_time_s,
            (torque - zero_branch) / gains.tracking_time_s,
        )
    } else {
        (0.0, 0.0)
    };
    let next = VirtualChainState {
        cadence_integral_nm: state.cadence_integral_nm + dt_s * (gains.cadence_ki * cadence_error + cadence_track),
        zero_integral_nm: state.zero_integral_nm + dt_s * (gains.zero_ki * zero_error + zero_track),
        branch,
        ratio,
    };
    Ok((
        GeneratorCommand {
            torque_nm: torque,
            unsaturated_nm: unsaturated,
            branch,
            cadence_reference_radps: reference,
            cadence_branch_nm: cadence_branch,
            zero_branch_nm: zero_branch,
        },
        next,
    ))
}

/// Steady-state and high-frequency gains of κ: `(β / β_v, M / M_v)`.
pub fn kappa_gains(mass_kg: f64, beta: f64, virtual_mass_kg: f64, virtual_beta: f64) -> Result<(f64, f64)> {
    positive("mass_kg", mass_kg)?;
    positive("beta", beta)?;
    positive("virtual_mass_kg", virtual_mass_kg)?;
    positive("virtual_beta", virtual_beta)?;
    Ok((beta / virtual_beta, mass_kg / virtual_mass_kg))
}

/// Bilinear discretization of κ, realized through the virtual speed.
///
/// The filter input is the chain-scaled rider torque `x = T_h / τ_v`. The
/// internal state `w` integrates the virtual bike
/// `M_v ẇ + β_v w = x / R_w` with the trapezoidal rule and the output is the
/// wheel torque the real bike needs to follow it, `R_w (M ẇ + β w)`. This is
/// exactly `(b0 + b1 z⁻¹) / (1 + a1 z⁻¹)` of the transformed κ, and seeding
/// `w` with the measured speed starts the virtual bike where the real one is.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KappaFilter {
    mass_kg: f64,
    beta: f64,
    virtual_mass_kg: f64,
    virtual_beta: f64,
    wheel_radius_m: f64,
    dt_s: f64,
    virtual_speed_mps: Option<f64>,
}

impl KappaFilter {
    pub fn new(
        mass_kg: f64,
        beta: f64,
        virtual_mass_kg: f64,
        virtual_beta: f64,
        wheel_radius_m: f64,
        dt_s: f64,
    ) -> Result<Self> {
        kappa_gains(mass_kg, beta, virtual_mass_kg, virtual_beta)?;
        positive("wheel_radius_m", wheel_radius_m)?;
        positive("dt_s", dt_s)?;
        Ok(Self {
            mass_kg,
            beta,
            virtual_mass_kg,
            virtual_beta,
            wheel_radius_m,
            dt_s,
            virtual_speed_mps: None,
        })
    }

    /// `(b0, b1, a1)` of `(b0 + b1 z⁻¹) / (1 + a1 z⁻¹)`.
    pub fn coefficients(&self) -> (f64, f64, f64) {
        let n1 = self.mass_kg / self.dt_s + 0.5 * self.beta;
        let n0 = -self.mass_kg / self.dt_s + 0.5 * self.beta;
        let d1 = self.virtual_mass_kg / self.dt_s + 0.5 * self.virtual_beta;
        let d0 = -self.virtual_mass_kg / self.dt_s + 0.5 * self.virtual_beta;
        (n1 / d1, n0 / d1, d0 / d1)
    }

    pub fn pole(&self) -> f64 {
        -self.coefficients().2
    }

    /// Steady-state gain of the realized filter, evaluated at its fixed
    /// point. Summing the transfer-function coefficients instead loses
    /// digits to cancellation when `M_v / dt` dwarfs `β_v`.
    pub fn dc_gain(&self) -> f64 {
        let mut probe = *self;
        probe.virtual_speed_mps = Some(1.0 / (self.wheel_radius_m * self.virtual_beta));
        probe.step(1.0).expect("probe is initialized")
    }

    /// Magnitude of the discrete response at `frequency_hz`.
    pub fn gain_at(&self, frequency_hz: f64) -> f64 {
        let (b0, b1, a1) = self.coefficients();
        let theta = 2.0 * core::f64::consts::PI * frequency_hz * self.dt_s;
        let (s, c) = (libm::sin(theta), libm::cos(theta));
        // z⁻¹ = cos θ - j sin θ
        let num = libm::hypot(b0 + b1 * c, b1 * s);
        let den = libm::hypot(1.0 + a1 * c, a1 * s);
        num / den
    }

    pub fn is_initialized(&self) -> bool {
        self.virtual_speed_mps.is_some()
    }

    pub fn virtual_speed(&self) -> Option<f64> {
        self.virtual_speed_mps
    }

    pub fn initialize(&mut self, speed_mps: f64) {
        self.virtual_speed_mps = Some(speed_mps);
    }

    pub fn reset(&mut self) {
        self.virtual_speed_mps = None;
    }

    /// Filters one sample of `x = T_h / τ_v` and returns the unsaturated motor
    /// torque.
    pub fn step(&mut self, input_nm: f64) -> Result<f64> {
        let w = self.virtual_speed_mps.ok_or(Error::FilterUninitialized)?;
        let u = input_nm / self.wheel_radius_m;
        let dw = (u - self.virtual_beta * w)
            / (self.virtual_mass_kg / self.dt_s + 0.5 * self.virtual_beta);
        let y = self.wheel_radius_m * ((self.mass_kg / self.dt_s + 0.5 * self.beta) * dw + self.beta * w);
        self.virtual_speed_mps = Some(w + dw);
        Ok(y)
    }
}

/// Virtual-bike motor law for one sample: `κ` applied to `T_h / τ_v`, then the
/// motor limits. Returns `(saturated, unsaturated)`.
pub fn kappa_filter_step(
    filter: &mut KappaFilter,
    rider_torque_nm: f64,
    ratio: f64,
    params: &BikeParameters,
    wheel_speed_radps: f64,
) -> Result<(f64, f64)> {
    positive("virtual_ratio", ratio)?;
    let raw = filter.step(rider_torque_nm / ratio)?;
    Ok((params.saturate_motor_torque(raw, wheel_speed_radps), raw))
}

/// One control-period sample of a closed-loop run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImpedanceSample {
    pub time_s: f64,
    pub speed_mps: f64,
    pub human_torque_nm: f64,
    pub ratio: f64,
    pub engaged: bool,
}

/// Largest violation of the imposed model
/// `M_v dv/dt + β_v v = T_h / (τ_v R_w)` over consecutive samples, with the
/// same trapezoidal, held-input discretization the controller uses.
pub fn impedance_solution_check(
    virtual_mass_kg: f64,
    virtual_beta: f64,
    wheel_radius_m: f64,
    samples: &[ImpedanceSample],
) -> Result<f64> {
    positive("virtual_mass_kg", virtual_mass_kg)?;
    positive("virtual_beta", virtual_beta)?;
    positive("wheel_radius_m", wheel_radius_m)?;
    if samples.iter().any(|s| s.engaged) {
        return Err(Error::EngagedSamples);
    }
    let mut worst = 0.0f64;
    for pair in samples.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let dt = b.time_s - a.time_s;
        positive("sample spacing", dt)?;
        let residual = virtual_mass_kg * (b.speed_mps - a.speed_mps) / dt
            + virtual_beta * 0.5 * (a.speed_mps + b.speed_mps)
            - a.human_torque_nm / (a.ratio * wheel_radius_m);
        worst = worst.max(residual.abs());
    }
    Ok(worst)
}

/// First-order tracking `T ẏ + y = r`, discretized exactly for a held
/// reference. A zero time constant is an ideal actuator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstOrderLag {
    pub time_constant_s: f64,
    output: f64,
}

impl FirstOrderLag {
    pub fn new(time_constant_s: f64) -> Result<Self> {
        non_negative("time_constant_s", time_constant_s)?;
        Ok(Self {
            time_constant_s,
            output: 0.0,
        })
    }

    pub fn output(&self) -> f64 {
        self.output
    }

    pub fn step(&mut self, reference: f64, dt_s: f64) -> f64 {
        if self.time_constant_s == 0.0 {
            self.output = reference;
        } else {
            let alpha = 1.0 - libm::exp(-dt_s / self.time_constant_s);
            self.output += alpha * (reference - self.output);
        }
        self.output
    }
}

/// Torque-loop lags of the motor and generator drives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActuatorLag {
    pub motor: FirstOrderLag,
    pub generator: FirstOrderLag,
}

impl ActuatorLag {
    pub fn new(motor_time_constant_s: f64, generator_time_constant_s: f64) -> Result<Self> {
        Ok(Self {
            motor: FirstOrderLag::new(motor_time_constant_s)?,
            generator: FirstOrderLag::new(generator_time_constant_s)?,
        })
    }

    pub fn ideal() -> Self {
        Self::new(0.0, 0.0).expect("zero lag is valid")
    }
}

impl Default for ActuatorLag {
    fn default() -> Self {
        Self::ideal()
    }
}

pub fn actuator_lag_step(lag: &mut FirstOrderLag, reference: f64, dt_s: f64) -> Result<f64> {
    positive("dt_s", dt_s)?;
    Ok(lag.step(reference, dt_s))
}

/// Controller selection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ControllerConfig {
    /// Machines off.
    None,
    VirtualChain {
        ratio: RatioPolicy,
        gains: GeneratorGains,
        torque_sensor: bool,
    },
    VirtualBike {
        spec: VirtualBikeSpec,
        /// Plant model used by κ: total mass and linearized resistance slope.
        plant_mass_kg: f64,
        plant_beta: f64,
        gains: GeneratorGains,
        torque_sensor: bool,
    },
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            ControllerConfig::None => Ok(()),
            ControllerConfig::VirtualChain { ratio, gains, .. } => {
                ratio.validate()?;
                gains.validate()
            }
            ControllerConfig::VirtualBike {
                spec,
                plant_mass_kg,
                plant_beta,
                gains,
                ..
            } => {
                spec.validate()?;
                positive("plant_mass_kg", *plant_mass_kg)?;
                positive("plant_beta", *plant_beta)?;
                gains.validate()
            }
        }
    }

    pub fn ratio_policy(&self) -> Option<RatioPolicy> {
        match self {
            ControllerConfig::None => None,
            ControllerConfig::VirtualChain { ratio, .. } => Some(*ratio),
            ControllerConfig::VirtualBike { spec, .. } => Some(spec.ratio),
        }
    }
}

/// What the controller reads at a control instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub speed_mps: f64,
    pub pedal_speed_radps: f64,
    pub wheel_speed_radps: f64,
    pub engaged: bool,
    pub generator_torque_nm: f64,
    pub rider_torque_sensor_nm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutput {
    pub motor_torque_nm: f64,
    pub motor_reference_nm: f64,
    pub generator_torque_nm: f64,
    pub generator_reference_nm: f64,
    pub ratio: f64,
    pub branch: Option<Branch>,
    pub rider_torque_estimate_nm: Option<f64>,
    /// Chain-scaled rider torque `T_h / τ_v` fed to the motor law.
    pub scaled_rider_torque_nm: Option<f64>,
    /// `T_m / (T_h / τ_v)` while the virtual bike shapes the motor command.
    pub kappa: Option<f64>,
    pub filter_initialized: bool,
}

impl ControlOutput {
    pub fn motor_saturated(&self) -> bool {
        self.motor_torque_nm != self.motor_reference_nm
    }

    pub fn generator_saturated(&self) -> bool {
        self.generator_torque_nm != self.generator_reference_nm
    }
}

/// Smallest chain-scaled rider torque for which κ is reported.
pub const KAPPA_MIN_INPUT_NM: f64 = 0.05;

/// Stateful controller running at the control period.
#[derive(Debug, Clone)]
pub struct Controller {
    config: ControllerConfig,
    params: BikeParameters,
    dt_s: f64,
    chain: VirtualChainState,
    filter: Option<KappaFilter>,
}

impl Controller {
    pub fn new(config: ControllerConfig, params: &BikeParameters, control_period_s: f64) -> Result<Self> {
        config.validate()?;
        positive("control_period_s", control_period_s)?;
        let filter = match config {
            ControllerConfig::VirtualBike {
                spec,
                plant_mass_kg,
                plant_beta,
                ..
            } => Some(KappaFilter::new(
                plant_mass_kg,
                plant_beta,
                spec.virtual_mass_kg,
                spec.virtual_resistance_n_per_mps,
                params.wheel_radius_m,
                control_period_s,
            )?),
            _ => None,
        };
        Ok(Self {
            config,
            params: *params,
            dt_s: control_period_s,
            chain: VirtualChainState::new(params.chain_ratio),
            filter,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn chain_state(&self) -> &VirtualChainState {
        &self.chain
    }

    pub fn filter(&self) -> Option<&KappaFilter> {
        self.filter.as_ref()
    }

    pub fn uses_torque_sensor(&self) -> bool {
        match self.config {
            ControllerConfig::None => false,
            ControllerConfig::VirtualChain { torque_sensor, .. }
            | ControllerConfig::VirtualBike { torque_sensor, .. } => torque_sensor,
        }
    }

    pub fn step(&mut self, m: &Measurement) -> Result<ControlOutput> {
        let (policy, gains) = match self.config {
            ControllerConfig::None => {
                return Ok(ControlOutput {
                    motor_torque_nm: 0.0,
                    motor_reference_nm: 0.0,
                    generator_torque_nm: 0.0,
                    generator_reference_nm: 0.0,
                    ratio: self.params.chain_ratio,
                    branch: None,
                    rider_torque_estimate_nm: m.rider_torque_sensor_nm,
                    scaled_rider_torque_nm: None,
                    kappa: None,
                    filter_initialized: false,
                })
            }
            ControllerConfig::VirtualChain { ratio, gains, .. } => (ratio, gains),
            ControllerConfig::VirtualBike { spec, gains, .. } => (spec.ratio, gains),
        };
        let wheel = m.wheel_speed_radps.max(0.0);
        let ratio = virtual_ratio(&policy, wheel, self.params.chain_ratio)?;
        let (generator, chain) = generator_command_vc(
            &self.chain,
            &gains,
            &self.params,
            m.pedal_speed_radps,
            wheel,
            ratio,
            m.generator_torque_nm,
            self.dt_s,
        )?;
        if !chain.is_finite() {
            return Err(Error::NumericalFault { time_s: f64::NAN });
        }
        self.chain = chain;

        let sensor = if self.uses_torque_sensor() {
            m.rider_torque_sensor_nm
        } else {
            None
        };
        let estimate = estimate_rider_torque(m.generator_torque_nm, m.engaged, sensor);
        let mut output = ControlOutput {
            motor_torque_nm: 0.0,
            motor_reference_nm: 0.0,
            generator_torque_nm: generator.torque_nm,
            generator_reference_nm: generator.unsaturated_nm,
            ratio,
            branch: Some(generator.branch),
            rider_torque_estimate_nm: estimate,
            scaled_rider_torque_nm: None,
            kappa: None,
            filter_initialized: false,
        };
        if m.engaged {
            // Parallel mode: the chain carries the rider, the motor stays off
            // and the virtual bike restarts at the next release.
            if let Some(filter) = self.filter.as_mut() {
                filter.reset();
            }
            return Ok(output);
        }
        let Some(estimate) = estimate else {
            return Ok(output);
        };
        let x = estimate / ratio;
        output.scaled_rider_torque_nm = Some(x);
        let raw = match self.filter.as_mut() {
            Some(filter) => {
                if !filter.is_initialized() {
                    filter.initialize(m.speed_mps);
                    output.filter_initialized = true;
                }
                let y = filter.step(x)?;
                if x.abs() > KAPPA_MIN_INPUT_NM {
                    output.kappa = Some(y / x);
                }
                y
            }
            None => x,
        };
        output.motor_reference_nm = raw;
        output.motor_torque_nm = self.params.saturate_motor_torque(raw, wheel);
        Ok(output)
    }
}
