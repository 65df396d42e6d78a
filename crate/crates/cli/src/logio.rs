//! CSV formats: simulation logs and coast-down traces.
//!
//! Floats are written with the shortest representation that parses back to
//! the same value, so a written log reads back bit-for-bit.

use std::io::{Read, Write};

use ebike_core::ident::CoastdownTrace;
use ebike_core::sim::LogRecord;

use crate::CliError;

pub const LOG_HEADER: [&str; 14] = [
    "t_s",
    "speed_mps",
    "pedal_speed_radps",
    "wheel_speed_radps",
    "engaged",
    "human_torque_nm",
    "motor_torque_nm",
    "generator_torque_nm",
    "chain_torque_nm",
    "ratio",
    "kappa",
    "motor_power_w",
    "generator_power_w",
    "soc",
];

pub const TRACE_HEADER: [&str; 2] = ["t", "omega_w"];

pub fn write_log<W: Write>(records: &[LogRecord], out: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(LOG_HEADER)?;
    for r in records {
        w.write_record([
            r.time_s.to_string(),
            r.speed_mps.to_string(),
            r.pedal_speed_radps.to_string(),
            r.wheel_speed_radps.to_string(),
            u8::from(r.engaged).to_string(),
            r.human_torque_nm.to_string(),
            r.motor_torque_nm.to_string(),
            r.generator_torque_nm.to_string(),
            r.chain_torque_nm.to_string(),
            r.ratio.to_string(),
            r.kappa.map_or_else(String::new, |k| k.to_string()),
            r.motor_power_w.to_string(),
            r.generator_power_w.to_string(),
            r.soc.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn check_header(found: &csv::StringRecord, expected: &[&str]) -> Result<(), CliError> {
    if found.iter().map(str::trim).eq(expected.iter().copied()) {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "unexpected CSV header `{}`, expected `{}`",
            found.iter().collect::<Vec<_>>().join(","),
            expected.join(",")
        )))
    }
}

fn field(row: &csv::StringRecord, line: usize, i: usize, name: &str) -> Result<f64, CliError> {
    let raw = row.get(i).unwrap_or("").trim();
    raw.parse::<f64>()
        .map_err(|_| CliError::Validation(format!("line {line}: column `{name}`: cannot parse `{raw}`")))
}

pub fn read_log<R: Read>(input: R) -> Result<Vec<LogRecord>, CliError> {
    let mut rdr = csv::Reader::from_reader(input);
    check_header(rdr.headers()?, &LOG_HEADER)?;
    let mut out = Vec::new();
    for (k, row) in rdr.records().enumerate() {
        let row = row?;
        let line = k + 2;
        let f = |i: usize| field(&row, line, i, LOG_HEADER[i]);
        let engaged = match row.get(4).map(str::trim) {
            Some("0") => false,
            Some("1") => true,
            other => {
                return Err(CliError::Validation(format!(
                    "line {line}: column `engaged`: expected 0 or 1, found `{}`",
                    other.unwrap_or("")
                )))
            }
        };
        let kappa = match row.get(10).map(str::trim) {
            None | Some("") => None,
            Some(_) => Some(f(10)?),
        };
        out.push(LogRecord {
            time_s: f(0)?,
            speed_mps: f(1)?,
            pedal_speed_radps: f(2)?,
            wheel_speed_radps: f(3)?,
            engaged,
            human_torque_nm: f(5)?,
            motor_torque_nm: f(6)?,
            generator_torque_nm: f(7)?,
            chain_torque_nm: f(8)?,
            ratio: f(9)?,
            kappa,
            motor_power_w: f(11)?,
            generator_power_w: f(12)?,
            soc: f(13)?,
        });
    }
    Ok(out)
}

pub fn write_trace<W: Write>(trace: &CoastdownTrace, out: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TRACE_HEADER)?;
    for (t, omega) in trace.times().iter().zip(trace.wheel_speeds()) {
        w.write_record([t.to_string(), omega.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace<R: Read>(input: R) -> Result<CoastdownTrace, CliError> {
    let mut rdr = csv::Reader::from_reader(input);
    check_header(rdr.headers()?, &TRACE_HEADER)?;
    let (mut times, mut speeds) = (Vec::new(), Vec::new());
    for (k, row) in rdr.records().enumerate() {
        let row = row?;
        times.push(field(&row, k + 2, 0, "t")?);
        speeds.push(field(&row, k + 2, 1, "omega_w")?);
    }
    Ok(CoastdownTrace::new(times, speeds)?)
}

/// Writes named columns of equal length.
pub fn write_columns<W: Write>(header: &[&str], columns: &[Vec<Option<f64>>], out: W) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    let n = columns.first().map_or(0, Vec::len);
    for i in 0..n {
        w.write_record(
            columns
                .iter()
                .map(|c| c[i].map_or_else(String::new, |v| v.to_string())),
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(t: f64, kappa: Option<f64>) -> LogRecord {
        LogRecord {
            time_s: t,
            speed_mps: 1.0 / 3.0,
            pedal_speed_radps: 2.094_395_102_393_195,
            wheel_speed_radps: 1e-17,
            engaged: kappa.is_none(),
            human_torque_nm: -0.0,
            motor_torque_nm: 12.5,
            generator_torque_nm: -7.25e-9,
            chain_torque_nm: 0.0,
            ratio: 1.8,
            kappa,
            motor_power_w: 123_456.789,
            generator_power_w: f64::MIN_POSITIVE,
            soc: 0.5,
        }
    }

    #[test]
    fn log_round_trips() {
        let records = vec![sample(0.0, None), sample(0.01, Some(1.47))];
        let mut buf = Vec::new();
        write_log(&records, &mut buf).unwrap();
        let back = read_log(buf.as_slice()).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn bad_header_is_rejected() {
        let err = read_log("t,speed\n0,1\n".as_bytes()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn trace_parse_reports_line() {
        let err = read_trace("t,omega_w\n0,10\n0.1,abc\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }
}
