#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;

use clap::{Parser, Subcommand};
use commands::{CliError, Ctx};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pdmpnet", version, about = "Controlled switched PDMPs on star networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration; omitted sections take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Sample every modelling assumption.
    Audit,
    /// Monte Carlo cost and one sample path of a feedback policy.
    Simulate,
    /// Value iteration and Hamilton-Jacobi residuals.
    Solve,
    /// Projection deviation exponents.
    Project,
    /// Shaken values on extended networks and the smooth subsolution.
    Extend,
    /// Occupation-measure LP, duality report and dual certificate.
    Linearize,
    /// Hashes and headline numbers of the artifacts in the output directory.
    Report,
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = std::env::var("PDMPNET_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().map_err(|e| CliError::Run(e.to_string()))?;
    }
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => "{}".to_string(),
    };
    let ctx = Ctx::new(&text, cli.seed, cli.out.clone(), cli.quiet)?;
    match cli.command {
        Command::Audit => commands::audit(&ctx),
        Command::Simulate => commands::simulate_cmd(&ctx),
        Command::Solve => commands::solve(&ctx),
        Command::Project => commands::project(&ctx),
        Command::Extend => commands::extend_cmd(&ctx),
        Command::Linearize => commands::linearize(&ctx),
        Command::Report => commands::report(&ctx),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.code() as u8)
        }
    }
}
