//! End-to-end tests of the `ebike` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ebike_cli::commands::{simulate, sweep};
use ebike_cli::logio::{read_log, write_trace};
use ebike_cli::presets::preset;
use ebike_cli::scenario_file::ScenarioFile;
use ebike_core::ident::simulate_coastdown;
use ebike_core::params::{kmh_to_mps, CoastdownCoeffs};
use ebike_core::sim::LogRecord;
use proptest::prelude::*;
use tempfile::tempdir;

const CRUISE: &str = include_str!("../../../scenarios/cruise_released.toml");

fn ebike(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ebike")).args(args).output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_log_summary_and_plots() {
    let dir = tempdir().unwrap();
    let scenario = write(dir.path(), "s.toml", CRUISE);
    let out = dir.path().join("out");
    let o = ebike(&["run", &scenario, "--out", out.to_str().unwrap(), "--svg"]);
    assert!(o.status.success(), "{}", stderr(&o));

    let expected = simulate(&ScenarioFile::parse(CRUISE).unwrap(), None).unwrap();
    let logged = read_log(fs::File::open(out.join("log.csv")).unwrap()).unwrap();
    assert_eq!(logged, expected.log.records);

    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let printed: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary, printed);
    assert_eq!(summary["mode"], "virtual_bike");

    for name in ["speed.svg", "torques.svg", "cadence.svg", "kappa.svg", "soc.svg"] {
        let svg = fs::read_to_string(out.join(name)).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"), "{name}");
    }
    let refs = fs::read_to_string(out.join("references.csv")).unwrap();
    assert_eq!(refs.lines().count(), logged.len() + 1);
}

#[test]
fn presets_run_by_name() {
    let dir = tempdir().unwrap();
    let o = ebike(&["run", "virtual_chain_20rpm", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(report["cadence_error_rpm"].as_f64().unwrap().abs() < 0.5);
}

#[test]
fn missing_key_is_a_validation_error() {
    let dir = tempdir().unwrap();
    let text = preset("test1_light").unwrap().replace("rider_mass_kg = 70.0\n", "");
    let scenario = write(dir.path(), "s.toml", &text);
    let o = ebike(&["run", &scenario, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("rider_mass_kg"), "{}", stderr(&o));
}

#[test]
fn missing_file_is_an_io_error() {
    let dir = tempdir().unwrap();
    let o = ebike(&["run", "no_such_scenario", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn overflowing_plant_is_a_numerical_error() {
    let dir = tempdir().unwrap();
    let text = preset("virtual_chain_20rpm")
        .unwrap()
        .replace("c_n_per_mps2 = 0.4", "c_n_per_mps2 = 1e308")
        .replace("[sim]\n", "[sim]\ninitial_speed_kmh = 20.0\n");
    let scenario = write(dir.path(), "s.toml", &text);
    let o = ebike(&["run", &scenario, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn identify_recovers_coefficients_and_writes_toml() {
    let dir = tempdir().unwrap();
    let truth = CoastdownCoeffs::new(4.0, 0.3, 0.4);
    let trace = simulate_coastdown(&truth, 95.0, 0.33, kmh_to_mps(35.0), 0.1, 60.0).unwrap();
    let path = dir.path().join("coast.csv");
    write_trace(&trace, fs::File::create(&path).unwrap()).unwrap();
    let toml_out = dir.path().join("coast.toml");
    let o = ebike(&[
        "identify",
        path.to_str().unwrap(),
        "--mass",
        "95",
        "--radius",
        "0.33",
        "--vbar",
        "6.5",
        "--out",
        toml_out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let doc: toml::Table = fs::read_to_string(&toml_out).unwrap().parse().unwrap();
    let c = doc["coastdown"].as_table().unwrap();
    let get = |k: &str| c[k].as_float().unwrap();
    assert!((get("a_n") - 4.0).abs() < 4e-3);
    assert!((get("b_n_per_mps") - 0.3).abs() < 3e-4);
    assert!((get("c_n_per_mps2") - 0.4).abs() < 4e-4);
    assert_eq!(String::from_utf8_lossy(&o.stdout), fs::read_to_string(&toml_out).unwrap());
}

#[test]
fn identify_constant_speed_is_not_identifiable() {
    let dir = tempdir().unwrap();
    let csv: String = std::iter::once("t,omega_w\n".to_string())
        .chain((0..100).map(|i| format!("{},10.0\n", i as f64 * 0.1)))
        .collect();
    let trace = write(dir.path(), "flat.csv", &csv);
    let o = ebike(&["identify", &trace, "--mass", "95", "--radius", "0.33"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn unknown_sweep_parameter_is_rejected() {
    let dir = tempdir().unwrap();
    let scenario = write(dir.path(), "s.toml", CRUISE);
    let o = ebike(&[
        "sweep",
        &scenario,
        "--param",
        "controller.no_such_key",
        "--values",
        "1,2",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no_such_key"), "{}", stderr(&o));
}

#[test]
fn single_value_sweep_matches_a_plain_run() {
    let dir = tempdir().unwrap();
    let rows = sweep(CRUISE, "controller.resistance_ratio", &[1.26], dir.path()).unwrap();
    let plain = simulate(&ScenarioFile::parse(CRUISE).unwrap(), None).unwrap();
    assert_eq!(rows[0].report, plain.report);
    let logged = read_log(fs::File::open(dir.path().join("run_0/log.csv")).unwrap()).unwrap();
    assert_eq!(logged, plain.log.records);
}

#[test]
fn mass_sweep_keeps_kappa_at_the_resistance_ratio() {
    let dir = tempdir().unwrap();
    let rows = sweep(CRUISE, "controller.mass_ratio", &[0.7, 1.0, 1.5], dir.path()).unwrap();
    for row in &rows {
        let k = row.report.steady_kappa.unwrap();
        assert!((k / 1.26 - 1.0).abs() < 0.01, "{} -> {k}", row.value);
    }
    let table = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
}

#[test]
fn resistance_sweep_orders_kappa() {
    let dir = tempdir().unwrap();
    let rows = sweep(CRUISE, "controller.resistance_ratio", &[0.7, 1.26, 2.1], dir.path()).unwrap();
    let k: Vec<f64> = rows.iter().map(|r| r.report.steady_kappa.unwrap()).collect();
    assert!(k[0] < 1.0 && k[2] > 1.0 && k[0] < k[1] && k[1] < k[2], "{k:?}");
    assert!((k[1] / 1.26 - 1.0).abs() < 0.01);
}

fn record() -> impl Strategy<Value = LogRecord> {
    let f = || -1e6f64..1e6;
    (
        (f(), f(), f(), f(), any::<bool>(), f(), f()),
        (f(), f(), f(), prop::option::of(f()), f(), f(), 0.0f64..1.0),
    )
        .prop_map(|((t, v, wp, ww, engaged, th, tm), (tg, tc, ratio, kappa, pm, pg, soc))| LogRecord {
            time_s: t,
            speed_mps: v,
            pedal_speed_radps: wp,
            wheel_speed_radps: ww,
            engaged,
            human_torque_nm: th,
            motor_torque_nm: tm,
            generator_torque_nm: tg,
            chain_torque_nm: tc,
            ratio,
            kappa,
            motor_power_w: pm,
            generator_power_w: pg,
            soc,
        })
}

proptest! {
    #[test]
    fn log_csv_round_trips(records in prop::collection::vec(record(), 0..20)) {
        let mut buf = Vec::new();
        ebike_cli::logio::write_log(&records, &mut buf).unwrap();
        prop_assert_eq!(read_log(buf.as_slice()).unwrap(), records);
    }
}
