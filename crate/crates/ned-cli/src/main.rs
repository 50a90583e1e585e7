//! `ned`: batch verification of nonuniform exponential dichotomies and
//! their roughness under perturbation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ned_cli::config::{self, Check, RunConfig};
use ned_cli::report::{self, RunReport};
use ned_cli::pipeline;

#[derive(Parser)]
#[command(
    name = "ned",
    about = "Verify nonuniform exponential dichotomies and certify their roughness",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonFlags {
    /// JSON config file; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario name (see `ned catalog`).
    #[arg(long)]
    scenario: Option<String>,
    /// Grid as `t_min,t_max,h`.
    #[arg(long, allow_hyphen_values = true)]
    grid: Option<String>,
    /// Star-norm exponent; chosen by the certificate scan when absent.
    #[arg(long)]
    beta: Option<f64>,
    /// Iteration tolerance.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long, value_name = "N")]
    max_iter: Option<usize>,
    /// Comma-separated subset of dichotomy,theta,perturb,admissibility,example.
    #[arg(long)]
    checks: Option<String>,
    /// Output directory for the report and tables (default `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for sampled pair selection.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the checks requested by the config (default: all).
    Verify(CommonFlags),
    /// Fit the dichotomy and evaluate the smallness quantity theta.
    Theta(CommonFlags),
    /// Theta plus the Picard construction of the perturbed family.
    Perturb(CommonFlags),
    /// The full pipeline through the admissibility fixed point.
    Admissible(CommonFlags),
    /// List built-in scenarios with defaults and analytic facts.
    Catalog,
    /// Re-emit tables from an existing report.
    Report {
        /// Path to a report.json produced by a previous run.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::Verify(flags) => run_checks(flags, None),
        Command::Theta(flags) => run_checks(flags, Some(vec![Check::Dichotomy, Check::Theta])),
        Command::Perturb(flags) => {
            run_checks(flags, Some(vec![Check::Dichotomy, Check::Theta, Check::Perturb]))
        }
        Command::Admissible(flags) => run_checks(
            flags,
            Some(vec![Check::Dichotomy, Check::Theta, Check::Perturb, Check::Admissibility]),
        ),
        Command::Catalog => {
            print_catalog()?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { input, out } => {
            let text = std::fs::read_to_string(&input)
                .map_err(|e| format!("cannot read {}: {e}", input.display()))?;
            let report: RunReport = serde_json::from_str(&text)
                .map_err(|e| format!("invalid report {}: {e}", input.display()))?;
            report::emit(&report, &out)?;
            println!("tables written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn run_checks(flags: CommonFlags, preset: Option<Vec<Check>>) -> Result<ExitCode, String> {
    let config = merge(flags, preset)?;
    let report = pipeline::run(&config)?;
    let out_dir = config
        .out
        .clone()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("out"));
    report::emit(&report, &out_dir)?;
    for check in &report.checks {
        let verdict = match check.verdict {
            report::Verdict::Pass => "pass",
            report::Verdict::Fail => "FAIL",
            report::Verdict::Error => "ERROR",
        };
        match &check.error {
            Some(e) => println!("{:<14} {:<5} ({e})", check.name, verdict),
            None => println!("{:<14} {verdict}", check.name),
        }
    }
    println!("report: {}", out_dir.join("report.json").display());
    Ok(ExitCode::from(report.exit_code() as u8))
}

fn merge(flags: CommonFlags, preset: Option<Vec<Check>>) -> Result<RunConfig, String> {
    let mut config = match &flags.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let scenario = flags
                .scenario
                .clone()
                .ok_or("either --config or --scenario is required")?;
            RunConfig::template(&scenario)
        }
    };
    if let Some(scenario) = flags.scenario {
        config.scenario = scenario;
    }
    if let Some(grid) = flags.grid {
        let parts: Vec<&str> = grid.split(',').collect();
        if parts.len() != 3 {
            return Err(format!("--grid expects t_min,t_max,h, got '{grid}'"));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad grid component '{s}': {e}"))
        };
        config.grid = Some(config::GridConfig {
            t_min: parse(parts[0])?,
            t_max: parse(parts[1])?,
            h: parse(parts[2])?,
        });
    }
    if let Some(beta) = flags.beta {
        config.beta = Some(beta);
    }
    if let Some(tol) = flags.tol {
        config.tol = tol;
    }
    if let Some(max_iter) = flags.max_iter {
        config.max_iter = max_iter;
    }
    if let Some(seed) = flags.seed {
        config.seed = seed;
    }
    if let Some(out) = flags.out {
        config.out = Some(out.display().to_string());
    }
    // Precedence: explicit --checks flag, then the subcommand preset, then
    // the config file.
    if let Some(list) = flags.checks {
        let mut checks = Vec::new();
        for part in list.split(',') {
            checks.push(Check::parse(part.trim())?);
        }
        config.checks = Some(checks);
    } else if let Some(preset) = preset {
        // `theta` may run from declared constants without a fit.
        let preset = if config.declared_constants.is_some() {
            preset.into_iter().filter(|c| *c != Check::Dichotomy).collect()
        } else {
            preset
        };
        config.checks = Some(preset);
    }
    Ok(config)
}

fn print_catalog() -> Result<(), String> {
    let entries = ned_core::scenarios::catalog();
    let rendered: Vec<serde_json::Value> = entries
        .iter()
        .map(|e| {
            serde_json::json!({
                "name": e.name,
                "summary": e.summary,
                "defaults": e.defaults,
                "facts": e.facts,
            })
        })
        .collect();
    let text = serde_json::to_string_pretty(&rendered).map_err(|e| e.to_string())?;
    println!("{text}");
    Ok(())
}
