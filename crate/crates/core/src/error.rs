use thiserror::Error;

/// Errors raised by the plant, controllers, identification and simulator.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid value for `{name}`: {reason}")]
    InvalidParameter {
        name: &'static str,
        reason: &'static str,
    },
    #[error("speed must be non-negative, got {0}")]
    NegativeSpeed(f64),
    #[error("pedal and wheel speeds are not locked (mismatch {mismatch_radps} rad/s)")]
    NotLocked { mismatch_radps: f64 },
    #[error("numerical fault at t = {time_s} s")]
    NumericalFault { time_s: f64 },
    #[error("rider script exhausted at t = {time_s} s")]
    ScriptExhausted { time_s: f64 },
    #[error("invalid coast-down trace: {0}")]
    InvalidTrace(&'static str),
    #[error("coast-down regressor is rank deficient, the trace does not excite the model")]
    NotIdentifiable,
    #[error("log contains no chain disengagement")]
    NoDisengagement,
    #[error("trajectory contains engaged samples")]
    EngagedSamples,
    #[error("kappa filter used before initialization")]
    FilterUninitialized,
    #[error("notch frequency {frequency_hz} Hz is at or above Nyquist ({nyquist_hz} Hz)")]
    NotchAboveNyquist { frequency_hz: f64, nyquist_hz: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn positive(name: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(Error::InvalidParameter {
            name,
            reason: "must be finite and strictly positive",
        })
    }
}

pub(crate) fn non_negative(name: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() && value >= 0.0 {
        Ok(value)
    } else {
        Err(Error::InvalidParameter {
            name,
            reason: "must be finite and non-negative",
        })
    }
}
