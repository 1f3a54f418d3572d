use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crossdiff_cli::commands::{cmd_convergence_study, cmd_reference, cmd_run};
use crossdiff_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "crossdiff", version, about = "Structure-preserving cross-diffusion gradient flows")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the JKO time loop and write snapshots and diagnostics.
    Run(Common),
    /// Compare JKO runs at several time steps with a backward Euler reference.
    StudyConvergence(Common),
    /// Run the backward Euler reference scheme.
    Reference(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    config: PathBuf,
    /// Overrides `output.dir` from the configuration.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Treat any energy increase as a solver failure.
    #[arg(long)]
    strict_dissipation: bool,
}

impl Common {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::from_file(&self.config)?;
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = dir.clone();
        }
        if self.strict_dissipation {
            cfg.strict_dissipation = true;
        }
        Ok(cfg)
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(c) => cmd_run(&c.load()?),
        Command::Reference(c) => cmd_reference(&c.load()?),
        Command::StudyConvergence(c) => {
            for row in cmd_convergence_study(&c.load()?)? {
                match row.observed_order {
                    Some(p) => println!("tau {:<8} error {:.6e}  order {:.3}", row.tau, row.relative_error, p),
                    None => println!("tau {:<8} error {:.6e}", row.tau, row.relative_error),
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
