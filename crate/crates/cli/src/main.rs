use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ebike_cli::commands::{identify, load_scenario_text, run, sweep, IdentifyArgs};
use ebike_cli::scenario_file::ScenarioFile;
use ebike_cli::CliError;
use ebike_core::ident::FitOptions;

/// Series-parallel human-powered e-bike simulator.
#[derive(Parser)]
#[command(name = "ebike", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario file or built-in preset.
    Run {
        /// Scenario file, or one of: virtual_chain_20rpm, test1_light,
        /// test2_medium, test3_heavy.
        scenario: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the sensor-noise seed of the scenario.
        #[arg(long)]
        seed: Option<u64>,
        /// Also write SVG plots.
        #[arg(long)]
        svg: bool,
    },
    /// Fit coast-down coefficients to a `t,omega_w` trace.
    Identify {
        trace: PathBuf,
        /// Total mass of bike and rider, kg.
        #[arg(long)]
        mass: f64,
        /// Wheel radius, m.
        #[arg(long)]
        radius: f64,
        /// Speed at which to report the linearized resistance, km/h.
        #[arg(long)]
        vbar: Option<f64>,
        /// Write a `[coastdown]` section to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Half width of the smoothing window, samples.
        #[arg(long, default_value_t = FitOptions::default().half_window)]
        half_window: usize,
        /// Order of the smoothing polynomial.
        #[arg(long, default_value_t = FitOptions::default().poly_order)]
        order: usize,
        /// Skip the trajectory refinement and keep the derivative fit.
        #[arg(long)]
        no_refine: bool,
    },
    /// Run a scenario once per value of a parameter.
    Sweep {
        scenario: String,
        /// Dotted key, e.g. `controller.resistance_ratio`.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { scenario, out, seed, svg } => {
            let file = ScenarioFile::parse(&load_scenario_text(&scenario)?)?;
            let report = run(&file, &out, seed, svg)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Identify {
            trace,
            mass,
            radius,
            vbar,
            out,
            half_window,
            order,
            no_refine,
        } => {
            let report = identify(&IdentifyArgs {
                trace: &trace,
                mass_kg: mass,
                wheel_radius_m: radius,
                vbar_kmh: vbar,
                out: out.as_deref(),
                options: FitOptions {
                    half_window,
                    poly_order: order,
                    refine: !no_refine,
                },
            })?;
            print!("{}", report.to_toml());
        }
        Command::Sweep {
            scenario,
            param,
            values,
            out,
        } => {
            let rows = sweep(&load_scenario_text(&scenario)?, &param, &values, &out)?;
            println!("value,steady_kappa,cadence_error_rpm,delta_soc,tracking_rms");
            let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
            for r in rows {
                println!(
                    "{},{},{},{},{}",
                    r.value,
                    opt(r.report.steady_kappa),
                    opt(r.report.cadence_error_rpm),
                    r.report.delta_soc,
                    opt(r.report.tracking_rms)
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
