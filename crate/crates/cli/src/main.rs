//! Command-line entry point: load a model and scenario, run the closed loop,
//! emit CSV logs and a pass/fail property report.
//!
//! Exit codes: 0 all properties pass, 1 property failure, 2 input error,
//! 3 numerical failure during the run.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wbc_core::scenario::{self, RunOverrides, RunReport, ScenarioError, ScenarioSchema};
use wbc_core::RobotModel;

mod logs;

#[derive(Parser)]
#[command(name = "wbc", about = "Whole-body controller scenario runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file in closed loop and evaluate its properties.
    Run {
        /// Scenario JSON file.
        scenario: PathBuf,
        /// Robot model JSON file; the built-in quadruped when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Override the control period, s.
        #[arg(long)]
        dt: Option<f64>,
        /// Override the friction coefficient of every contact.
        #[arg(long)]
        mu: Option<f64>,
        /// Write the run report as JSON to this path.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Write CSV log streams into this directory.
        #[arg(long)]
        logs: Option<PathBuf>,
    },
    /// Write the built-in model and the scenario library as editable files.
    Export {
        /// Output directory; receives models/ and scenarios/ subdirectories.
        #[arg(long, default_value = ".")]
        dir: PathBuf,
    },
}

enum CliError {
    /// Bad input files or arguments; exit code 2.
    Input(String),
    /// The closed loop failed numerically; exit code 3.
    Numerical(String),
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Controller(_) | ScenarioError::Simulation(_) => {
                CliError::Numerical(e.to_string())
            }
            other => CliError::Input(other.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run { scenario, model, dt, mu, report, logs } => {
            run_command(&scenario, model.as_deref(), dt, mu, report.as_deref(), logs.as_deref())
        }
        Command::Export { dir } => export_command(&dir).map(|()| true),
    };
    match outcome {
        Ok(true) => ExitCode::from(0),
        Ok(false) => ExitCode::from(1),
        Err(CliError::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

fn run_command(
    scenario_path: &Path,
    model_path: Option<&Path>,
    dt: Option<f64>,
    mu: Option<f64>,
    report_path: Option<&Path>,
    logs_dir: Option<&Path>,
) -> Result<bool, CliError> {
    let schema = ScenarioSchema::load(scenario_path).map_err(CliError::from)?;
    let model = match model_path {
        Some(p) => RobotModel::<f64>::load(p).map_err(|e| CliError::Input(e.to_string()))?,
        None => wbc_core::default_quadruped(),
    };
    let overrides =
        RunOverrides { control_period: dt, friction_mu: mu, qp_stage_enabled: None };
    let (report, log) = scenario::run(&model, &schema, &overrides).map_err(CliError::from)?;

    print_summary(&report);
    if let Some(path) = report_path {
        let text = serde_json::to_string_pretty(&report)
            .map_err(|e| CliError::Input(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| CliError::Input(e.to_string()))?;
    }
    if let Some(dir) = logs_dir {
        logs::emit(dir, &log).map_err(|e| CliError::Input(e.to_string()))?;
    }
    Ok(report.all_pass())
}

fn print_summary(report: &RunReport) {
    println!("scenario: {}", report.scenario);
    println!(
        "steps: {}  qp optimal: {}  qp fallback: {}",
        report.steps, report.qp_optimal, report.qp_fallback
    );
    println!(
        "mean cycle: {:.3} ms  max cycle: {:.3} ms",
        report.mean_cycle_seconds * 1e3,
        report.max_cycle_seconds * 1e3
    );
    println!("max pyramid violation: {:.3e} N", report.max_pyramid_violation);
    for p in &report.properties {
        let status = if p.pass { "pass" } else { "FAIL" };
        println!("property {}: {} ({})", p.name, status, p.detail);
    }
    println!("result: {}", if report.all_pass() { "PASS" } else { "FAIL" });
}

fn export_command(dir: &Path) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Input(e.to_string());
    let models = dir.join("models");
    let scenarios = dir.join("scenarios");
    std::fs::create_dir_all(&models).map_err(io)?;
    std::fs::create_dir_all(&scenarios).map_err(io)?;
    let model = wbc_core::default_quadruped::<f64>();
    std::fs::write(models.join("quadruped.json"), model.to_json()).map_err(io)?;
    for schema in scenario::scenario_library() {
        let path = scenarios.join(format!("{}.json", schema.name));
        std::fs::write(path, schema.to_json()).map_err(io)?;
    }
    Ok(())
}
