//! TOML scenario files. Physical values are SI except cadence (`_rpm`) and
//! speed (`_kmh`). Unknown keys are rejected.

use std::path::Path;

use ebike_core::controllers::{ActuatorLag, ControllerConfig, GeneratorGains};
use ebike_core::params::{
    kmh_to_mps, rpm_to_radps, BikeParameters, CoastdownCoeffs, RatioPolicy, VehicleState,
    VirtualBikeSpec,
};
use ebike_core::rider::{RiderPhase, RiderScript, DEFAULT_RIPPLE};
use ebike_core::sim::{Battery, Scenario, SensorNoise, DEFAULT_DWELL_PERIODS, DEFAULT_NOTCH_Q};
use serde::Deserialize;

use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub schema_version: u32,
    pub bike: BikeSection,
    pub coastdown: CoastdownSection,
    pub rider: RiderSection,
    pub controller: ControllerSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub battery: BatterySection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BikeSection {
    pub bike_mass_kg: f64,
    pub rider_mass_kg: f64,
    pub wheel_radius_m: f64,
    pub chain_ratio: f64,
    pub motor_torque_constant_nm_per_a: f64,
    pub generator_torque_constant_nm_per_a: f64,
    pub generator_inertia_kgm2: f64,
    pub motor_torque_limit_nm: f64,
    pub motor_power_limit_w: f64,
    pub generator_torque_limit_nm: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoastdownSection {
    pub a_n: f64,
    pub b_n_per_mps: f64,
    pub c_n_per_mps2: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiderSection {
    pub phases: Vec<PhaseSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Pedal,
    Coast,
    Slowdown,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSection {
    pub behavior: Behavior,
    pub duration_s: f64,
    pub mean_torque_nm: Option<f64>,
    pub ripple: Option<f64>,
    pub target_cadence_rpm: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    None,
    VirtualChain,
    VirtualBike,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::None => "none",
            Mode::VirtualChain => "virtual_chain",
            Mode::VirtualBike => "virtual_bike",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub mode: Mode,
    /// Constant-cadence policy.
    pub cadence_rpm: Option<f64>,
    /// Fixed-ratio policy.
    pub ratio: Option<f64>,
    #[serde(default)]
    pub torque_sensor: bool,
    pub virtual_mass_kg: Option<f64>,
    /// `M / M_v`, alternative to `virtual_mass_kg`.
    pub mass_ratio: Option<f64>,
    pub virtual_resistance_n_per_mps: Option<f64>,
    /// `β(v̄) / β_v`, alternative to `virtual_resistance_n_per_mps`.
    pub resistance_ratio: Option<f64>,
    /// Operating speed where the resistance is linearized.
    pub linearization_speed_kmh: Option<f64>,
    #[serde(default)]
    pub gains: GainsSection,
    #[serde(default)]
    pub motor_lag_s: f64,
    #[serde(default)]
    pub generator_lag_s: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GainsSection {
    pub cadence_kp: f64,
    pub cadence_ki: f64,
    pub zero_kp: f64,
    pub zero_ki: f64,
    pub tracking_time_s: f64,
    pub anti_windup: bool,
}

impl Default for GainsSection {
    fn default() -> Self {
        let g = GeneratorGains::default();
        Self {
            cadence_kp: g.cadence_kp,
            cadence_ki: g.cadence_ki,
            zero_kp: g.zero_kp,
            zero_ki: g.zero_ki,
            tracking_time_s: g.tracking_time_s,
            anti_windup: g.anti_windup,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    /// Defaults to the length of the rider script.
    pub duration_s: Option<f64>,
    pub plant_dt_s: f64,
    pub control_period_s: f64,
    pub initial_speed_kmh: f64,
    /// Pedal cadence with the chain released; absent means pedals locked to
    /// the wheel.
    pub initial_cadence_rpm: Option<f64>,
    pub initial_soc: f64,
    pub dwell_periods: u32,
    pub notch_q: f64,
    pub seed: u64,
    pub noise: Option<NoiseSection>,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            duration_s: None,
            plant_dt_s: 1e-3,
            control_period_s: 1e-2,
            initial_speed_kmh: 0.0,
            initial_cadence_rpm: None,
            initial_soc: 0.5,
            dwell_periods: DEFAULT_DWELL_PERIODS,
            notch_q: DEFAULT_NOTCH_Q,
            seed: 0,
            noise: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub pedal_sigma_radps: f64,
    pub wheel_sigma_radps: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatterySection {
    pub capacity_wh: f64,
    pub charge_efficiency: f64,
    pub discharge_efficiency: f64,
}

impl Default for BatterySection {
    fn default() -> Self {
        let b = Battery::default();
        Self {
            capacity_wh: b.capacity_wh,
            charge_efficiency: b.charge_efficiency,
            discharge_efficiency: b.discharge_efficiency,
        }
    }
}

/// Virtual-bike parameters resolved from the file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VirtualBikeTarget {
    pub virtual_mass_kg: f64,
    pub virtual_beta: f64,
    pub plant_mass_kg: f64,
    pub plant_beta: f64,
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn exclusive(a: Option<f64>, a_name: &str, b: Option<f64>, b_name: &str) -> Result<Option<(bool, f64)>, CliError> {
    match (a, b) {
        (Some(_), Some(_)) => Err(invalid(format!("controller: `{a_name}` and `{b_name}` are mutually exclusive"))),
        (Some(x), None) => Ok(Some((true, x))),
        (None, Some(x)) => Ok(Some((false, x))),
        (None, None) => Ok(None),
    }
}

impl ScenarioFile {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let file: Self = toml::from_str(text).map_err(|e| invalid(format!("scenario: {}", e.message())))?;
        file.check_version()
    }

    /// Deserializes an already parsed document.
    pub fn deserialize_table(doc: toml::Table) -> Result<Self, CliError> {
        let file: Self = doc.try_into().map_err(|e: toml::de::Error| invalid(format!("scenario: {}", e.message())))?;
        file.check_version()
    }

    fn check_version(self) -> Result<Self, CliError> {
        let file = self;
        if file.schema_version != SCHEMA_VERSION {
            return Err(invalid(format!(
                "schema_version: expected {SCHEMA_VERSION}, found {}",
                file.schema_version
            )));
        }
        Ok(file)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn params(&self) -> BikeParameters {
        let b = &self.bike;
        BikeParameters {
            bike_mass_kg: b.bike_mass_kg,
            rider_mass_kg: b.rider_mass_kg,
            wheel_radius_m: b.wheel_radius_m,
            chain_ratio: b.chain_ratio,
            motor_torque_constant_nm_per_a: b.motor_torque_constant_nm_per_a,
            generator_torque_constant_nm_per_a: b.generator_torque_constant_nm_per_a,
            generator_inertia_kgm2: b.generator_inertia_kgm2,
            motor_torque_limit_nm: b.motor_torque_limit_nm,
            motor_power_limit_w: b.motor_power_limit_w,
            generator_torque_limit_nm: b.generator_torque_limit_nm,
        }
    }

    pub fn coeffs(&self) -> CoastdownCoeffs {
        CoastdownCoeffs::new(self.coastdown.a_n, self.coastdown.b_n_per_mps, self.coastdown.c_n_per_mps2)
    }

    fn ratio_policy(&self) -> Result<RatioPolicy, CliError> {
        let c = &self.controller;
        match exclusive(c.cadence_rpm, "cadence_rpm", c.ratio, "ratio")? {
            Some((true, rpm)) => Ok(RatioPolicy::ConstantCadence {
                cadence_radps: rpm_to_radps(rpm),
            }),
            Some((false, ratio)) => Ok(RatioPolicy::Fixed { ratio }),
            None => Err(invalid("controller: one of `cadence_rpm` or `ratio` is required")),
        }
    }

    /// Virtual and plant parameters of a virtual-bike controller.
    pub fn virtual_bike(&self) -> Result<Option<VirtualBikeTarget>, CliError> {
        let c = &self.controller;
        if c.mode != Mode::VirtualBike {
            return Ok(None);
        }
        let params = self.params();
        let vbar_kmh = c
            .linearization_speed_kmh
            .ok_or_else(|| invalid("controller: `linearization_speed_kmh` is required for virtual_bike"))?;
        if !(vbar_kmh.is_finite() && vbar_kmh >= 0.0) {
            return Err(invalid("controller.linearization_speed_kmh: must be finite and non-negative"));
        }
        let plant_mass_kg = params.total_mass_kg();
        let plant_beta = self.coeffs().slope(kmh_to_mps(vbar_kmh));
        let virtual_mass_kg = match exclusive(c.virtual_mass_kg, "virtual_mass_kg", c.mass_ratio, "mass_ratio")? {
            Some((true, m)) => m,
            Some((false, r)) => plant_mass_kg / r,
            None => return Err(invalid("controller: one of `virtual_mass_kg` or `mass_ratio` is required")),
        };
        let virtual_beta = match exclusive(
            c.virtual_resistance_n_per_mps,
            "virtual_resistance_n_per_mps",
            c.resistance_ratio,
            "resistance_ratio",
        )? {
            Some((true, b)) => b,
            Some((false, r)) => plant_beta / r,
            None => {
                return Err(invalid(
                    "controller: one of `virtual_resistance_n_per_mps` or `resistance_ratio` is required",
                ))
            }
        };
        Ok(Some(VirtualBikeTarget {
            virtual_mass_kg,
            virtual_beta,
            plant_mass_kg,
            plant_beta,
        }))
    }

    fn controller_config(&self) -> Result<ControllerConfig, CliError> {
        let c = &self.controller;
        let g = &c.gains;
        let gains = GeneratorGains {
            cadence_kp: g.cadence_kp,
            cadence_ki: g.cadence_ki,
            zero_kp: g.zero_kp,
            zero_ki: g.zero_ki,
            tracking_time_s: g.tracking_time_s,
            anti_windup: g.anti_windup,
        };
        Ok(match c.mode {
            Mode::None => ControllerConfig::None,
            Mode::VirtualChain => ControllerConfig::VirtualChain {
                ratio: self.ratio_policy()?,
                gains,
                torque_sensor: c.torque_sensor,
            },
            Mode::VirtualBike => {
                let target = self.virtual_bike()?.expect("mode is virtual_bike");
                ControllerConfig::VirtualBike {
                    spec: VirtualBikeSpec {
                        virtual_mass_kg: target.virtual_mass_kg,
                        virtual_resistance_n_per_mps: target.virtual_beta,
                        ratio: self.ratio_policy()?,
                    },
                    plant_mass_kg: target.plant_mass_kg,
                    plant_beta: target.plant_beta,
                    gains,
                    torque_sensor: c.torque_sensor,
                }
            }
        })
    }

    fn script(&self) -> Result<RiderScript, CliError> {
        let mut phases = Vec::with_capacity(self.rider.phases.len());
        for (i, p) in self.rider.phases.iter().enumerate() {
            let phase = match p.behavior {
                Behavior::Pedal => {
                    let torque = p
                        .mean_torque_nm
                        .ok_or_else(|| invalid(format!("rider.phases[{i}]: missing field `mean_torque_nm`")))?;
                    RiderPhase::pedal(p.duration_s, torque).with_ripple(p.ripple.unwrap_or(DEFAULT_RIPPLE))
                }
                Behavior::Coast => RiderPhase::coast(p.duration_s),
                Behavior::Slowdown => {
                    let rpm = p.target_cadence_rpm.ok_or_else(|| {
                        invalid(format!("rider.phases[{i}]: missing field `target_cadence_rpm`"))
                    })?;
                    RiderPhase::slowdown(p.duration_s, rpm_to_radps(rpm))
                }
            };
            phases.push(phase);
        }
        RiderScript::new(phases).map_err(CliError::from)
    }

    /// Builds and validates the simulation. `seed` overrides the file seed.
    pub fn to_scenario(&self, seed: Option<u64>) -> Result<Scenario, CliError> {
        let params = self.params();
        let mut scenario = Scenario::new(params, self.coeffs(), self.script()?, self.controller_config()?);
        let s = &self.sim;
        if let Some(d) = s.duration_s {
            scenario.duration_s = d;
        }
        scenario.plant_dt_s = s.plant_dt_s;
        scenario.control_period_s = s.control_period_s;
        scenario.dwell_periods = s.dwell_periods;
        scenario.lag = ActuatorLag::new(self.controller.motor_lag_s, self.controller.generator_lag_s)?;
        let speed = kmh_to_mps(s.initial_speed_kmh);
        scenario.initial_state = match s.initial_cadence_rpm {
            None => VehicleState {
                time_s: 0.0,
                speed_mps: speed,
                pedal_speed_radps: params.wheel_speed(speed) / params.chain_ratio,
                clutch_engaged: true,
                soc_fraction: s.initial_soc,
            },
            Some(rpm) => VehicleState {
                time_s: 0.0,
                speed_mps: speed,
                pedal_speed_radps: rpm_to_radps(rpm),
                clutch_engaged: false,
                soc_fraction: s.initial_soc,
            },
        };
        scenario.battery = Battery {
            capacity_wh: self.battery.capacity_wh,
            charge_efficiency: self.battery.charge_efficiency,
            discharge_efficiency: self.battery.discharge_efficiency,
        };
        scenario.noise = s.noise.as_ref().map(|n| SensorNoise {
            pedal_sigma_radps: n.pedal_sigma_radps,
            wheel_sigma_radps: n.wheel_sigma_radps,
            seed: seed.unwrap_or(s.seed),
        });
        if !(s.notch_q.is_finite() && s.notch_q > 0.0) {
            return Err(invalid("sim.notch_q: must be finite and strictly positive"));
        }
        scenario.validate()?;
        Ok(scenario)
    }
}

/// Scenario keys accepted by `sweep`, and whether each is an integer.
pub const SWEEPABLE: [(&str, bool); 37] = [
    ("bike.bike_mass_kg", false),
    ("bike.rider_mass_kg", false),
    ("bike.wheel_radius_m", false),
    ("bike.chain_ratio", false),
    ("bike.motor_torque_constant_nm_per_a", false),
    ("bike.generator_torque_constant_nm_per_a", false),
    ("bike.generator_inertia_kgm2", false),
    ("bike.motor_torque_limit_nm", false),
    ("bike.motor_power_limit_w", false),
    ("bike.generator_torque_limit_nm", false),
    ("coastdown.a_n", false),
    ("coastdown.b_n_per_mps", false),
    ("coastdown.c_n_per_mps2", false),
    ("controller.cadence_rpm", false),
    ("controller.ratio", false),
    ("controller.virtual_mass_kg", false),
    ("controller.mass_ratio", false),
    ("controller.virtual_resistance_n_per_mps", false),
    ("controller.resistance_ratio", false),
    ("controller.linearization_speed_kmh", false),
    ("controller.motor_lag_s", false),
    ("controller.generator_lag_s", false),
    ("controller.gains.cadence_kp", false),
    ("controller.gains.cadence_ki", false),
    ("controller.gains.zero_kp", false),
    ("controller.gains.zero_ki", false),
    ("controller.gains.tracking_time_s", false),
    ("sim.duration_s", false),
    ("sim.initial_speed_kmh", false),
    ("sim.initial_cadence_rpm", false),
    ("sim.initial_soc", false),
    ("sim.dwell_periods", true),
    ("sim.notch_q", false),
    ("sim.seed", true),
    ("battery.capacity_wh", false),
    ("battery.charge_efficiency", false),
    ("battery.discharge_efficiency", false),
];

/// Sets a sweepable key in a scenario document. Setting one side of a
/// mutually exclusive pair removes the other.
pub fn override_key(doc: &mut toml::Table, path: &str, value: f64) -> Result<(), CliError> {
    let integer = SWEEPABLE
        .iter()
        .find(|(k, _)| *k == path)
        .map(|(_, int)| *int)
        .ok_or_else(|| CliError::UnknownParameter(path.to_string()))?;
    let mut parts: Vec<&str> = path.split('.').collect();
    let key = parts.pop().expect("non-empty path");
    let mut table = doc;
    for part in &parts {
        table = table
            .entry(*part)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Validation(format!("`{part}` is not a table")))?;
    }
    const PAIRS: [(&str, &str); 3] = [
        ("virtual_mass_kg", "mass_ratio"),
        ("virtual_resistance_n_per_mps", "resistance_ratio"),
        ("cadence_rpm", "ratio"),
    ];
    if parts == ["controller"] {
        for (a, b) in PAIRS {
            if key == a {
                table.remove(b);
            } else if key == b {
                table.remove(a);
            }
        }
    }
    let v = if integer {
        if value.fract() != 0.0 || value < 0.0 {
            return Err(CliError::Validation(format!("{path}: expected a non-negative integer, found {value}")));
        }
        toml::Value::Integer(value as i64)
    } else {
        toml::Value::Float(value)
    };
    table.insert(key.to_string(), v);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
schema_version = 1

[bike]
bike_mass_kg = 25.0
rider_mass_kg = 70.0
wheel_radius_m = 0.33
chain_ratio = 1.8
motor_torque_constant_nm_per_a = 1.69
generator_torque_constant_nm_per_a = 10.7
generator_inertia_kgm2 = 0.5
motor_torque_limit_nm = 40.0
motor_power_limit_w = 500.0
generator_torque_limit_nm = 60.0

[coastdown]
a_n = 4.0
b_n_per_mps = 0.3
c_n_per_mps2 = 0.4

[[rider.phases]]
behavior = "pedal"
duration_s = 2.0
mean_torque_nm = 20.0

[controller]
mode = "virtual_chain"
cadence_rpm = 20.0
"#;

    #[test]
    fn minimal_file_builds() {
        let f = ScenarioFile::parse(MINIMAL).unwrap();
        let s = f.to_scenario(None).unwrap();
        assert_eq!(s.duration_s, 2.0);
        assert!(s.initial_state.clutch_engaged);
        assert!(matches!(
            s.controller,
            ControllerConfig::VirtualChain {
                ratio: RatioPolicy::ConstantCadence { .. },
                ..
            }
        ));
    }

    #[test]
    fn missing_key_is_named() {
        let text = MINIMAL.replace("rider_mass_kg = 70.0\n", "");
        let err = ScenarioFile::parse(&text).unwrap_err();
        assert!(err.to_string().contains("rider_mass_kg"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = MINIMAL.replace("[coastdown]\n", "[coastdown]\nd_n = 1.0\n");
        let err = ScenarioFile::parse(&text).unwrap_err();
        assert!(err.to_string().contains("d_n"), "{err}");
    }

    #[test]
    fn wrong_schema_version() {
        let text = MINIMAL.replace("schema_version = 1", "schema_version = 7");
        assert!(ScenarioFile::parse(&text).is_err());
    }

    #[test]
    fn virtual_bike_ratios_resolve() {
        let text = MINIMAL.replace(
            "mode = \"virtual_chain\"",
            "mode = \"virtual_bike\"\nmass_ratio = 1.47\nresistance_ratio = 2.10\nlinearization_speed_kmh = 6.5",
        );
        let f = ScenarioFile::parse(&text).unwrap();
        let t = f.virtual_bike().unwrap().unwrap();
        assert!((t.plant_beta - 1.744_444_444_444_444_4).abs() < 1e-12);
        assert!((t.plant_mass_kg / t.virtual_mass_kg - 1.47).abs() < 1e-12);
        assert!((t.plant_beta / t.virtual_beta - 2.10).abs() < 1e-12);
    }

    #[test]
    fn exclusive_keys_conflict() {
        let text = MINIMAL.replace("cadence_rpm = 20.0", "cadence_rpm = 20.0\nratio = 3.0");
        let f = ScenarioFile::parse(&text).unwrap();
        assert!(f.to_scenario(None).is_err());
    }

    #[test]
    fn override_replaces_partner_key() {
        let mut doc: toml::Table = MINIMAL.parse().unwrap();
        override_key(&mut doc, "controller.ratio", 3.0).unwrap();
        let f: ScenarioFile = doc.try_into().unwrap();
        assert_eq!(f.controller.ratio, Some(3.0));
        assert_eq!(f.controller.cadence_rpm, None);
    }

    #[test]
    fn override_rejects_unknown_and_sets_integers() {
        let mut doc: toml::Table = MINIMAL.parse().unwrap();
        assert!(matches!(
            override_key(&mut doc, "bike.colour", 1.0),
            Err(CliError::UnknownParameter(_))
        ));
        override_key(&mut doc, "sim.dwell_periods", 3.0).unwrap();
        override_key(&mut doc, "controller.gains.cadence_kp", 30.0).unwrap();
        let f: ScenarioFile = doc.try_into().unwrap();
        assert_eq!(f.sim.dwell_periods, 3);
        assert_eq!(f.controller.gains.cadence_kp, 30.0);
    }
}
