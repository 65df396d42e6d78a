//! Run summaries and derived series written next to the log.

use ebike_core::controllers::ControllerConfig;
use ebike_core::params::{radps_to_rpm, RatioPolicy};
use ebike_core::sim::{
    notch_postprocess, steady_kappa, summarize, tracking_rms_error, virtual_model_reference, EnergyAudit, Scenario,
    SimLog,
};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Time allowed for the virtual model to settle after a release before the
/// tracking error is scored.
pub const TRACKING_SETTLE_S: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub human_j: f64,
    pub kinetic_change_j: f64,
    pub battery_change_j: f64,
    pub conversion_loss_j: f64,
    pub resistance_j: f64,
    pub brake_j: f64,
    pub impact_j: f64,
    pub standstill_j: f64,
    pub balance_j: f64,
    pub relative_error: f64,
}

impl From<&EnergyAudit> for EnergyReport {
    fn from(e: &EnergyAudit) -> Self {
        Self {
            human_j: e.human_j,
            kinetic_change_j: e.kinetic_change_j,
            battery_change_j: e.battery_change_j,
            conversion_loss_j: e.conversion_loss_j,
            resistance_j: e.resistance_j,
            brake_j: e.brake_j,
            impact_j: e.impact_j,
            standstill_j: e.standstill_j,
            balance_j: e.balance_j(),
            relative_error: e.relative_error(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mode: String,
    pub duration_s: f64,
    pub engagements: usize,
    pub disengagements: usize,
    pub min_clutch_dwell_s: Option<f64>,
    pub soc_start: f64,
    pub soc_end: f64,
    pub delta_soc: f64,
    pub series_cadence_rpm: Option<f64>,
    /// Mean series cadence minus the commanded cadence.
    pub cadence_error_rpm: Option<f64>,
    pub kappa_min: Option<f64>,
    pub kappa_max: Option<f64>,
    /// Motor torque over chain-scaled rider torque across the second half of
    /// the run.
    pub steady_kappa: Option<f64>,
    /// Relative RMS error between speed and the virtual model.
    pub tracking_rms: Option<f64>,
    pub motor_saturations: usize,
    pub generator_saturations: usize,
    pub max_lock_violation_radps: f64,
    pub energy: EnergyReport,
}

fn target_cadence(scenario: &Scenario) -> Option<f64> {
    let policy = match &scenario.controller {
        ControllerConfig::None => return None,
        ControllerConfig::VirtualChain { ratio, .. } => ratio,
        ControllerConfig::VirtualBike { spec, .. } => &spec.ratio,
    };
    match policy {
        RatioPolicy::ConstantCadence { cadence_radps } => Some(*cadence_radps),
        RatioPolicy::Fixed { .. } => None,
    }
}

/// Virtual model speed for virtual-bike runs.
pub fn reference_speed(scenario: &Scenario, log: &SimLog) -> Result<Option<Vec<Option<f64>>>, CliError> {
    match &scenario.controller {
        ControllerConfig::VirtualBike { spec, .. } => Ok(Some(virtual_model_reference(
            &log.records,
            spec.virtual_mass_kg,
            spec.virtual_resistance_n_per_mps,
            scenario.params.wheel_radius_m,
        )?)),
        _ => Ok(None),
    }
}

pub fn build_report(mode: &str, scenario: &Scenario, log: &SimLog) -> Result<Report, CliError> {
    let s = summarize(log, &scenario.params);
    let tracking_rms = match reference_speed(scenario, log)? {
        Some(w) => tracking_rms_error(&log.records, &w, TRACKING_SETTLE_S),
        None => None,
    };
    let cadence_error_rpm = match (s.series_cadence_rpm, target_cadence(scenario)) {
        (Some(c), Some(target)) => Some(c - radps_to_rpm(target)),
        _ => None,
    };
    Ok(Report {
        mode: mode.to_string(),
        duration_s: s.duration_s,
        engagements: s.engagements,
        disengagements: s.disengagements,
        min_clutch_dwell_s: s.min_clutch_dwell_s,
        soc_start: s.soc_start,
        soc_end: s.soc_end,
        delta_soc: s.soc_end - s.soc_start,
        series_cadence_rpm: s.series_cadence_rpm,
        cadence_error_rpm,
        kappa_min: s.kappa_min,
        kappa_max: s.kappa_max,
        steady_kappa: steady_kappa(log, 0.5 * s.duration_s),
        tracking_rms,
        motor_saturations: s.motor_saturations,
        generator_saturations: s.generator_saturations,
        max_lock_violation_radps: s.max_lock_violation_radps,
        energy: EnergyReport::from(&log.energy),
    })
}

/// Cadence whose ripple is notched out of the torque plots: the commanded
/// cadence, or the mean pedal speed of a fixed-ratio run.
pub fn notch_cadence(scenario: &Scenario, log: &SimLog) -> Option<f64> {
    target_cadence(scenario).or_else(|| {
        let n = log.records.len();
        let mean = log.records.iter().map(|r| r.pedal_speed_radps).sum::<f64>() / n.max(1) as f64;
        (mean > 0.0).then_some(mean)
    })
}

/// Derived series: virtual reference speed and notch-filtered torques.
pub struct DerivedSeries {
    pub reference_speed_mps: Option<Vec<Option<f64>>>,
    pub human_torque_nm: Vec<f64>,
    pub motor_torque_nm: Vec<f64>,
    pub generator_torque_nm: Vec<f64>,
}

pub fn derived_series(scenario: &Scenario, log: &SimLog, notch_q: f64) -> Result<DerivedSeries, CliError> {
    let column = |f: fn(&ebike_core::sim::LogRecord) -> f64| log.records.iter().map(f).collect::<Vec<_>>();
    let (h, m, g) = (
        column(|r| r.human_torque_nm),
        column(|r| r.motor_torque_nm),
        column(|r| r.generator_torque_nm),
    );
    let filtered = match notch_cadence(scenario, log) {
        Some(c) => {
            let dt = log.control_period_s;
            (
                notch_postprocess(&h, dt, c, notch_q)?,
                notch_postprocess(&m, dt, c, notch_q)?,
                notch_postprocess(&g, dt, c, notch_q)?,
            )
        }
        None => (h, m, g),
    };
    Ok(DerivedSeries {
        reference_speed_mps: reference_speed(scenario, log)?,
        human_torque_nm: filtered.0,
        motor_torque_nm: filtered.1,
        generator_torque_nm: filtered.2,
    })
}
