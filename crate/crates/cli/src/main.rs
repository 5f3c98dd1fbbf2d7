//! `tra`: run scenarios, sweep crash points and check layering.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tra_core::component::EdgesFile;
use tra_core::harness::{crash_sweep, run_scenario, RunOptions, Scenario};
use tra_core::{load_manifest, validate_layering, FaultSpec};

#[derive(Parser)]
#[command(name = "tra", version, about = "Transactional component runtime harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Text,
    Structured,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario once.
    Run {
        scenario: PathBuf,
        /// Seed for the interleaving scheduler; defaults to the scenario's.
        #[arg(long)]
        seed: Option<u64>,
        /// Crash injection, `<target>@<point>`; may be repeated.
        #[arg(long = "fault", value_name = "TARGET@POINT")]
        faults: Vec<FaultSpec>,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        report: ReportFormat,
    },
    /// Re-run a scenario with a crash at every (target, point) combination.
    Sweep {
        scenario: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        report: ReportFormat,
    },
    /// Check call edges against the layering rules.
    Validate {
        manifest: PathBuf,
        edges: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        report: ReportFormat,
    },
}

fn json(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

fn execute(command: Command) -> Result<bool, String> {
    match command {
        Command::Run {
            scenario,
            seed,
            faults,
            report,
        } => {
            let scenario = Scenario::load(&scenario).map_err(|e| e.to_string())?;
            let options = RunOptions {
                seed,
                faults,
                ..RunOptions::default()
            };
            let result = run_scenario(&scenario, &options).map_err(|e| e.to_string())?;
            match report {
                ReportFormat::Text => println!("{result}"),
                ReportFormat::Structured => println!("{}", result.to_json()),
            }
            Ok(result.passed)
        }
        Command::Sweep { scenario, report } => {
            let scenario = Scenario::load(&scenario).map_err(|e| e.to_string())?;
            let result = crash_sweep(&scenario).map_err(|e| e.to_string())?;
            match report {
                ReportFormat::Text => println!("{result}"),
                ReportFormat::Structured => println!("{}", json(&result)),
            }
            Ok(result.passed())
        }
        Command::Validate {
            manifest,
            edges,
            report,
        } => {
            let read = |p: &PathBuf| fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()));
            let model = load_manifest(&read(&manifest)?).map_err(|e| format!("{}: {e}", manifest.display()))?;
            let file: EdgesFile = read(&edges)?.parse().map_err(|e| format!("{}: {e}", edges.display()))?;
            let calls = file.call_edges().map_err(|e| e.to_string())?;
            let result = validate_layering(&model, &calls).map_err(|e| e.to_string())?;
            match report {
                ReportFormat::Text => print!("{result}"),
                ReportFormat::Structured => println!("{}", json(&result)),
            }
            Ok(result.is_empty())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("tra: {e}");
            ExitCode::from(2)
        }
    }
}
