use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dqfleet::sim::ScenarioKind;
use dqfleet_cli::commands::{execute, report, threads_from_env, CliError};
use dqfleet_cli::config::parse_config;

const DEFAULT_OUT: &str = "results";

/// Cooperative pose estimation experiments for satellite fleets.
#[derive(Parser)]
#[command(name = "dqfleet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    /// Run a single seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Signal-to-noise ratio.
    #[arg(long, global = true, value_name = "X")]
    snr: Option<f64>,

    /// Number of satellites.
    #[arg(long, global = true, value_name = "N")]
    sats: Option<usize>,

    /// Consensus mode.
    #[arg(long, global = true, value_parser = ["none", "soft", "hardsoft"])]
    mode: Option<String>,

    /// Fraction of satellites with an absolute pose sensor.
    #[arg(long, global = true, value_name = "FRAC")]
    leaders: Option<f64>,

    /// Leaders keep their own estimate during consensus.
    #[arg(long, global = true, value_name = "BOOL", action = clap::ArgAction::Set)]
    stubborn: Option<bool>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Cooperative against independent filters over noise levels.
    Sweep,
    /// Controlled approach to a formation around a central body.
    Asteroid,
    /// Fleets where only some satellites carry an absolute sensor.
    Leaders,
    /// One satellite running the stand-alone filter.
    SingleDemo,
}

impl Command {
    fn kind(self) -> ScenarioKind {
        match self {
            Command::Sweep => ScenarioKind::Sweep,
            Command::Asteroid => ScenarioKind::Asteroid,
            Command::Leaders => ScenarioKind::Leaders,
            Command::SingleDemo => ScenarioKind::Single,
        }
    }
}

fn overrides(cli: &Cli) -> Vec<(&'static str, String)> {
    let mut out = Vec::new();
    if let Some(v) = cli.seed {
        out.push(("seeds", v.to_string()));
    }
    if let Some(v) = cli.snr {
        out.push(("snr", v.to_string()));
    }
    if let Some(v) = cli.sats {
        out.push(("sats", v.to_string()));
    }
    if let Some(v) = &cli.mode {
        out.push(("mode", v.clone()));
    }
    if let Some(v) = cli.leaders {
        out.push(("leaders", v.to_string()));
    }
    if let Some(v) = cli.stubborn {
        out.push(("stubborn", v.to_string()));
    }
    out
}

fn run(cli: &Cli) -> Result<ExitCode, CliError> {
    let kind = cli.command.kind();
    let cfg = parse_config(cli.config.as_deref(), kind, &overrides(cli))?;
    if let Some(v) = &cfg.version {
        if v != env!("CARGO_PKG_VERSION") {
            eprintln!("warning: manifest was written by version {v}, running {}", env!("CARGO_PKG_VERSION"));
        }
    }
    let out = cli.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let threads = threads_from_env()?;
    let outcome = execute(&cfg, &out, threads)?;
    let mut stdout = std::io::stdout().lock();
    report(&mut stdout, &outcome).map_err(|source| CliError::Io { path: PathBuf::from("<stdout>"), source })?;
    println!("wrote {} files to {}", outcome.files.len(), out.display());
    if outcome.failed() {
        eprintln!("error: {} of {} filter runs diverged", outcome.diverged(), outcome.mode_runs());
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
