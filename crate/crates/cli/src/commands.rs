//! `run`, `identify` and `sweep`.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ebike_core::ident::{fit_coastdown_with, linearize_beta, CoastdownFit, FitOptions};
use ebike_core::params::{kmh_to_mps, mps_to_kmh, radps_to_rpm};
use ebike_core::sim::{run_scenario, Scenario, SimLog};
use log::{info, warn};
use serde::Serialize;

use crate::logio::{read_trace, write_columns, write_log};
use crate::presets::preset;
use crate::report::{build_report, derived_series, Report};
use crate::scenario_file::{override_key, ScenarioFile};
use crate::svg::{Chart, Series};
use crate::CliError;

/// Reads a scenario from a path, or from a built-in preset of that name when
/// no such file exists.
pub fn load_scenario_text(source: &str) -> Result<String, CliError> {
    let path = Path::new(source);
    if path.exists() {
        return fs::read_to_string(path).map_err(|e| CliError::Io(format!("cannot read {source}: {e}")));
    }
    preset(source)
        .map(str::to_string)
        .ok_or_else(|| CliError::Io(format!("no scenario file or preset named `{source}`")))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))
}

pub struct RunOutput {
    pub scenario: Scenario,
    pub log: SimLog,
    pub report: Report,
}

/// Simulates a parsed scenario without touching the file system.
pub fn simulate(file: &ScenarioFile, seed: Option<u64>) -> Result<RunOutput, CliError> {
    let scenario = file.to_scenario(seed)?;
    let log = run_scenario(&scenario)?;
    let report = build_report(file.controller.mode.name(), &scenario, &log)?;
    Ok(RunOutput { scenario, log, report })
}

/// Runs a scenario and writes `log.csv`, `references.csv`, `summary.json`
/// and, with `svg`, the plots.
pub fn run(file: &ScenarioFile, out_dir: &Path, seed: Option<u64>, svg: bool) -> Result<Report, CliError> {
    ensure_dir(out_dir)?;
    let out = simulate(file, seed)?;
    info!(
        "simulated {} s, {} records, {} clutch events",
        out.report.duration_s,
        out.log.records.len(),
        out.log.clutch_events().count()
    );
    write_outputs(file, &out, out_dir, svg)?;
    Ok(out.report)
}

fn write_outputs(file: &ScenarioFile, out: &RunOutput, out_dir: &Path, svg: bool) -> Result<(), CliError> {
    let records = &out.log.records;
    write_log(records, create(&out_dir.join("log.csv"))?)?;

    let derived = derived_series(&out.scenario, &out.log, file.sim.notch_q)?;
    let time: Vec<Option<f64>> = records.iter().map(|r| Some(r.time_s)).collect();
    let reference = derived
        .reference_speed_mps
        .clone()
        .unwrap_or_else(|| vec![None; records.len()]);
    let some = |v: &[f64]| v.iter().copied().map(Some).collect::<Vec<_>>();
    write_columns(
        &[
            "t_s",
            "reference_speed_mps",
            "human_torque_filtered_nm",
            "motor_torque_filtered_nm",
            "generator_torque_filtered_nm",
        ],
        &[
            time,
            reference.clone(),
            some(&derived.human_torque_nm),
            some(&derived.motor_torque_nm),
            some(&derived.generator_torque_nm),
        ],
        create(&out_dir.join("references.csv"))?,
    )?;

    let json = serde_json::to_string_pretty(&out.report).expect("report serializes");
    fs::write(out_dir.join("summary.json"), json + "\n")?;

    if svg {
        let t: Vec<f64> = records.iter().map(|r| r.time_s).collect();
        let pts = |y: Vec<Option<f64>>| t.iter().copied().zip(y).collect::<Vec<_>>();
        let mut speed = vec![Series {
            name: "speed",
            points: pts(records.iter().map(|r| Some(mps_to_kmh(r.speed_mps))).collect()),
        }];
        if derived.reference_speed_mps.is_some() {
            speed.push(Series {
                name: "virtual model",
                points: pts(reference.iter().map(|w| w.map(mps_to_kmh)).collect()),
            });
        }
        let charts = [
            (
                "speed.svg",
                Chart {
                    title: "Vehicle speed",
                    x_label: "time (s)",
                    y_label: "speed (km/h)",
                    series: speed,
                },
            ),
            (
                "torques.svg",
                Chart {
                    title: "Torques (ripple notched)",
                    x_label: "time (s)",
                    y_label: "torque (Nm)",
                    series: vec![
                        Series {
                            name: "rider",
                            points: pts(some(&derived.human_torque_nm)),
                        },
                        Series {
                            name: "motor",
                            points: pts(some(&derived.motor_torque_nm)),
                        },
                        Series {
                            name: "generator",
                            points: pts(some(&derived.generator_torque_nm)),
                        },
                    ],
                },
            ),
            (
                "cadence.svg",
                Chart {
                    title: "Pedal cadence",
                    x_label: "time (s)",
                    y_label: "cadence (rpm)",
                    series: vec![Series {
                        name: "cadence",
                        points: pts(records.iter().map(|r| Some(radps_to_rpm(r.pedal_speed_radps))).collect()),
                    }],
                },
            ),
            (
                "kappa.svg",
                Chart {
                    title: "Motor gain kappa",
                    x_label: "time (s)",
                    y_label: "kappa",
                    series: vec![Series {
                        name: "kappa",
                        points: pts(records.iter().map(|r| r.kappa).collect()),
                    }],
                },
            ),
            (
                "soc.svg",
                Chart {
                    title: "Battery state of charge",
                    x_label: "time (s)",
                    y_label: "SOC (%)",
                    series: vec![Series {
                        name: "SOC",
                        points: pts(records.iter().map(|r| Some(100.0 * r.soc)).collect()),
                    }],
                },
            ),
        ];
        for (name, chart) in charts {
            fs::write(out_dir.join(name), chart.render())?;
        }
    }
    Ok(())
}

/// Result of `identify`, also written as a `[coastdown]` section.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentifyReport {
    pub a_n: f64,
    pub b_n_per_mps: f64,
    pub c_n_per_mps2: f64,
    pub residual_rms_n: f64,
    pub samples_used: usize,
    pub beta_n_per_mps: Option<f64>,
    pub vbar_kmh: Option<f64>,
}

impl IdentifyReport {
    fn new(fit: &CoastdownFit, vbar_kmh: Option<f64>) -> Self {
        let c = &fit.coeffs;
        Self {
            a_n: c.constant_n,
            b_n_per_mps: c.linear_n_per_mps,
            c_n_per_mps2: c.quadratic_n_per_mps2,
            residual_rms_n: fit.residual_rms_n,
            samples_used: fit.samples_used,
            beta_n_per_mps: vbar_kmh.map(|v| linearize_beta(c, kmh_to_mps(v))),
            vbar_kmh,
        }
    }

    /// Text for a scenario `[coastdown]` section, fit statistics as comments.
    pub fn to_toml(&self) -> String {
        let mut s = format!(
            "# residual RMS {} N over {} samples\n",
            self.residual_rms_n, self.samples_used
        );
        if let (Some(b), Some(v)) = (self.beta_n_per_mps, self.vbar_kmh) {
            s += &format!("# beta at {v} km/h: {b} N/(m/s)\n");
        }
        s += &format!(
            "[coastdown]\na_n = {:?}\nb_n_per_mps = {:?}\nc_n_per_mps2 = {:?}\n",
            self.a_n, self.b_n_per_mps, self.c_n_per_mps2
        );
        s
    }
}

pub struct IdentifyArgs<'a> {
    pub trace: &'a Path,
    pub mass_kg: f64,
    pub wheel_radius_m: f64,
    pub vbar_kmh: Option<f64>,
    pub out: Option<&'a Path>,
    pub options: FitOptions,
}

pub fn identify(args: &IdentifyArgs) -> Result<IdentifyReport, CliError> {
    let file = File::open(args.trace).map_err(|e| CliError::Io(format!("cannot read {}: {e}", args.trace.display())))?;
    let trace = read_trace(file)?;
    let fit = fit_coastdown_with(&trace, args.mass_kg, args.wheel_radius_m, &args.options)?;
    let report = IdentifyReport::new(&fit, args.vbar_kmh);
    if let Some(out) = args.out {
        fs::write(out, report.to_toml()).map_err(|e| CliError::Io(format!("cannot write {}: {e}", out.display())))?;
    }
    Ok(report)
}

/// One row of the sweep comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: f64,
    pub report: Report,
}

/// Runs one scenario per value, in parallel, each in `out_dir/run_<i>`, and
/// writes `sweep.csv`.
pub fn sweep(base_text: &str, param: &str, values: &[f64], out_dir: &Path) -> Result<Vec<SweepRow>, CliError> {
    let base: toml::Table = base_text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Validation(format!("scenario: {}", e.message())))?;
    ScenarioFile::parse(base_text)?;
    let mut files = Vec::with_capacity(values.len());
    for &v in values {
        let mut doc = base.clone();
        override_key(&mut doc, param, v)?;
        let file = ScenarioFile::deserialize_table(doc)?;
        files.push(file);
    }
    ensure_dir(out_dir)?;
    let dirs: Vec<PathBuf> = (0..values.len()).map(|i| out_dir.join(format!("run_{i}"))).collect();
    let results: Vec<Result<Report, CliError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = files
            .iter()
            .zip(&dirs)
            .map(|(file, dir)| scope.spawn(move || run(file, dir, None, false)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    });
    let mut rows = Vec::with_capacity(values.len());
    for (&value, result) in values.iter().zip(results) {
        match result {
            Ok(report) => rows.push(SweepRow { value, report }),
            Err(e) => {
                warn!("{param} = {value}: {e}");
                return Err(e);
            }
        }
    }
    let column = |f: fn(&Report) -> Option<f64>| rows.iter().map(|r| f(&r.report)).collect::<Vec<_>>();
    write_columns(
        &["value", "steady_kappa", "cadence_error_rpm", "delta_soc", "tracking_rms"],
        &[
            rows.iter().map(|r| Some(r.value)).collect(),
            column(|r| r.steady_kappa),
            column(|r| r.cadence_error_rpm),
            column(|r| Some(r.delta_soc)),
            column(|r| r.tracking_rms),
        ],
        create(&out_dir.join("sweep.csv"))?,
    )?;
    Ok(rows)
}
