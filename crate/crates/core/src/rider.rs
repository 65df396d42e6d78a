//! Scripted rider: a sequence of phases replayed against the simulated bike.

use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Default crank-torque ripple, as a fraction of the mean torque.
pub const DEFAULT_RIPPLE: f64 = 0.3;
/// Proportional gain of the leg tracking a slowing cadence, Nm s/rad.
pub const LEG_GAIN: f64 = 5.0;
/// Largest torque a rider applies to the cranks, Nm.
pub const MAX_RIDER_TORQUE: f64 = 80.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RiderBehavior {
    /// Push the cranks with `mean (1 + ripple sin 2θ)`.
    Pedal,
    /// Hands off the cranks.
    FreewheelCoast,
    /// Slow the pedals along a linear cadence ramp down to
    /// `target_cadence_radps`.
    BackpedalSlowdown { target_cadence_radps: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiderPhase {
    pub duration_s: f64,
    pub mean_torque_nm: f64,
    pub ripple_fraction: f64,
    pub behavior: RiderBehavior,
}

impl RiderPhase {
    pub fn pedal(duration_s: f64, mean_torque_nm: f64) -> Self {
        Self {
            duration_s,
            mean_torque_nm,
            ripple_fraction: DEFAULT_RIPPLE,
            behavior: RiderBehavior::Pedal,
        }
    }

    pub fn coast(duration_s: f64) -> Self {
        Self {
            duration_s,
            mean_torque_nm: 0.0,
            ripple_fraction: 0.0,
            behavior: RiderBehavior::FreewheelCoast,
        }
    }

    pub fn slowdown(duration_s: f64, target_cadence_radps: f64) -> Self {
        Self {
            duration_s,
            mean_torque_nm: 0.0,
            ripple_fraction: 0.0,
            behavior: RiderBehavior::BackpedalSlowdown {
                target_cadence_radps,
            },
        }
    }

    pub fn with_ripple(mut self, ripple_fraction: f64) -> Self {
        self.ripple_fraction = ripple_fraction;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiderScript {
    phases: Vec<RiderPhase>,
}

impl RiderScript {
    pub fn new(phases: Vec<RiderPhase>) -> Result<Self> {
        if phases.is_empty() {
            return Err(Error::InvalidParameter {
                name: "rider.phases",
                reason: "at least one phase is required",
            });
        }
        for phase in &phases {
            if !(phase.duration_s.is_finite() && phase.duration_s > 0.0) {
                return Err(Error::InvalidParameter {
                    name: "rider.phases.duration_s",
                    reason: "must be finite and strictly positive",
                });
            }
            if !(0.0..1.0).contains(&phase.ripple_fraction) {
                return Err(Error::InvalidParameter {
                    name: "rider.phases.ripple",
                    reason: "must lie in [0, 1)",
                });
            }
            if !phase.mean_torque_nm.is_finite() {
                return Err(Error::InvalidParameter {
                    name: "rider.phases.mean_torque_nm",
                    reason: "must be finite",
                });
            }
            if let RiderBehavior::BackpedalSlowdown {
                target_cadence_radps,
            } = phase.behavior
            {
                if !target_cadence_radps.is_finite() {
                    return Err(Error::InvalidParameter {
                        name: "rider.phases.target_cadence",
                        reason: "must be finite",
                    });
                }
            }
        }
        Ok(Self { phases })
    }

    pub fn phases(&self) -> &[RiderPhase] {
        &self.phases
    }

    pub fn horizon_s(&self) -> f64 {
        self.phases.iter().map(|p| p.duration_s).sum()
    }

    /// Phase active at `t_s` with its index and start time. Times past the
/// horizon exhaust the script.
    pub fn phase_at(&self, t_s: f64) -> Result<(usize, f64, &RiderPhase)> {
        let mut start = 0.0;
        for (i, phase) in self.phases.iter().enumerate() {
            let end = start + phase.duration_s;
            if t_s < end {
                return Ok((i, start, phase));
            }
            start = end;
        }
        // The horizon itself still belongs to the last phase, up to the
        // rounding of a clock built from summed steps.
        match self.phases.last() {
            Some(last) if t_s <= start + 1e-9 * start.max(1.0) => Ok((self.phases.len() - 1, start - last.duration_s, last)),
            _ => Err(Error::ScriptExhausted { time_s: t_s }),
        }
    }
}

/// Rider torque at `t_s`.
///
/// `entry_cadence_radps` is the pedal speed when the current phase began; only
/// the slowdown ramp uses it.
pub fn rider_torque(
    script: &RiderScript,
    t_s: f64,
    crank_angle_rad: f64,
    pedal_speed_radps: f64,
    entry_cadence_radps: f64,
) -> Result<f64> {
    let (_, start, phase) = script.phase_at(t_s)?;
    let torque = match phase.behavior {
        RiderBehavior::Pedal => {
            phase.mean_torque_nm
                * (1.0 + phase.ripple_fraction * libm::sin(2.0 * crank_angle_rad))
        }
        RiderBehavior::FreewheelCoast => 0.0,
        RiderBehavior::BackpedalSlowdown {
            target_cadence_radps,
        } => {
            let progress = ((t_s - start) / phase.duration_s).clamp(0.0, 1.0);
            let reference =
                entry_cadence_radps + (target_cadence_radps - entry_cadence_radps) * progress;
            LEG_GAIN * (reference - pedal_speed_radps)
        }
    };
    Ok(torque.clamp(-MAX_RIDER_TORQUE, MAX_RIDER_TORQUE))
}

/// Stateful rider: owns the crank angle and the cadence at phase entry.
#[derive(Debug, Clone)]
pub struct Rider {
    script: RiderScript,
    crank_angle_rad: f64,
    phase_index: Option<usize>,
    entry_cadence_radps: f64,
}

impl Rider {
    pub fn new(script: RiderScript) -> Self {
        Self {
            script,
            crank_angle_rad: 0.0,
            phase_index: None,
            entry_cadence_radps: 0.0,
        }
    }

    pub fn script(&self) -> &RiderScript {
        &self.script
    }

    pub fn crank_angle(&self) -> f64 {
        self.crank_angle_rad
    }

    pub fn torque(&mut self, t_s: f64, pedal_speed_radps: f64) -> Result<f64> {
        let (index, _, _) = self.script.phase_at(t_s)?;
        if self.phase_index != Some(index) {
            self.phase_index = Some(index);
            self.entry_cadence_radps = pedal_speed_radps;
        }
        rider_torque(
            &self.script,
            t_s,
            self.crank_angle_rad,
            pedal_speed_radps,
            self.entry_cadence_radps,
        )
    }

    /// Integrates the crank angle over a step with the trapezoidal rule.
    pub fn advance(&mut self, pedal_speed_start: f64, pedal_speed_end: f64, dt_s: f64) {
        self.crank_angle_rad += 0.5 * (pedal_speed_start + pedal_speed_end) * dt_s;
        self.crank_angle_rad = libm::fmod(self.crank_angle_rad, 2.0 * core::f64::consts::PI);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use core::f64::consts::PI;

    fn script(phase: RiderPhase) -> RiderScript {
        RiderScript::new(vec![phase]).unwrap()
    }

    #[test]
    fn constant_torque_without_ripple() {
        let s = script(RiderPhase::pedal(10.0, 20.0).with_ripple(0.0));
        for theta in [0.0, 0.3, 1.7, 4.0] {
            assert_eq!(rider_torque(&s, 1.0, theta, 2.0, 0.0).unwrap(), 20.0);
        }
    }

    #[test]
    fn ripple_peak_at_quarter_pi() {
        let s = script(RiderPhase::pedal(10.0, 20.0).with_ripple(0.5));
        let t = rider_torque(&s, 1.0, PI / 4.0, 2.0, 0.0).unwrap();
        assert!((t - 30.0).abs() < 1e-12);
    }

    #[test]
    fn coasting_rider_applies_nothing() {
        let s = script(RiderPhase::coast(5.0));
        assert_eq!(rider_torque(&s, 2.0, 1.0, 3.0, 3.0).unwrap(), 0.0);
    }

    #[test]
    fn slowdown_tracks_ramp() {
        let s = script(RiderPhase::slowdown(2.0, 0.0));
        // halfway down a ramp from 2 rad/s, pedals still at 2 rad/s
        let t = rider_torque(&s, 1.0, 0.0, 2.0, 2.0).unwrap();
        assert!((t - LEG_GAIN * (1.0 - 2.0)).abs() < 1e-12);
    }

    #[test]
    fn torque_is_clamped() {
        let s = script(RiderPhase::pedal(1.0, 100.0).with_ripple(0.0));
        assert_eq!(rider_torque(&s, 0.5, 0.0, 0.0, 0.0).unwrap(), MAX_RIDER_TORQUE);
    }

    #[test]
    fn beyond_horizon_exhausts_script() {
        let s = RiderScript::new(vec![RiderPhase::pedal(1.0, 10.0), RiderPhase::coast(2.0)]).unwrap();
        assert_eq!(s.horizon_s(), 3.0);
        assert_eq!(rider_torque(&s, 2.5, 0.0, 0.0, 0.0).unwrap(), 0.0);
        assert_eq!(rider_torque(&s, 3.0, 0.0, 0.0, 0.0).unwrap(), 0.0);
        assert!(matches!(
            rider_torque(&s, 3.001, 0.0, 0.0, 0.0),
            Err(Error::ScriptExhausted { .. })
        ));
    }

    #[test]
    fn invalid_scripts_are_rejected() {
        assert!(RiderScript::new(vec![]).is_err());
        assert!(RiderScript::new(vec![RiderPhase::pedal(0.0, 1.0)]).is_err());
        assert!(RiderScript::new(vec![RiderPhase::pedal(1.0, 1.0).with_ripple(1.0)]).is_err());
    }

    #[test]
    fn rider_records_entry_cadence_per_phase() {
        let s = RiderScript::new(vec![RiderPhase::pedal(1.0, 10.0), RiderPhase::slowdown(1.0, 0.0)])
            .unwrap();
        let mut r = Rider::new(s);
        r.torque(0.5, 1.0).unwrap();
        // entering the slowdown at 3 rad/s: reference starts at 3
        let t = r.torque(1.0, 3.0).unwrap();
        assert!(t.abs() < 1e-12);
        let t = r.torque(1.5, 3.0).unwrap();
        assert!((t + LEG_GAIN * 1.5).abs() < 1e-12);
    }

    proptest::proptest! {
        /// Mean over one crank revolution at fixed cadence equals the mean
        /// torque (midpoint rule on a trigonometric polynomial is exact) as
        /// long as the peak stays below the rider clamp.
        #[test]
        fn revolution_mean_is_mean_torque(t0 in 0.0f64..44.0, a in 0.0f64..0.8, phase in 0.0f64..6.3) {
            let s = script(RiderPhase::pedal(10.0, t0).with_ripple(a));
            let n = 64;
            let mean: f64 = (0..n)
                .map(|k| {
                    let theta = phase + 2.0 * PI * (k as f64 + 0.5) / n as f64;
                    rider_torque(&s, 1.0, theta, 2.0, 0.0).unwrap()
                })
                .sum::<f64>() / n as f64;
            proptest::prop_assert!((mean - t0).abs() < 1e-9 * t0.max(1.0));
        }

        /// The ripple repeats twice per crank revolution.
        #[test]
        fn ripple_has_two_strokes_per_revolution(a in 0.0f64..0.99, theta in 0.0f64..6.3) {
            let s = script(RiderPhase::pedal(10.0, 20.0).with_ripple(a));
            let t1 = rider_torque(&s, 1.0, theta, 2.0, 0.0).unwrap();
            let t2 = rider_torque(&s, 1.0, theta + PI, 2.0, 0.0).unwrap();
            proptest::prop_assert!((t1 - t2).abs() < 1e-9);
            proptest::prop_assert!(t1 > 0.0);
        }
    }
}
