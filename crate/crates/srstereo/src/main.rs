use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use srstereo::commands;
use srstereo::config::RunConfig;
use srstereo::AppResult;

/// Stepwise-regression stereo matching on synthetic scenes.
#[derive(Parser)]
#[command(name = "srstereo", version)]
struct Cli {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set model.m=1.0`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (same as `--set output=DIR`).
    #[arg(long, short, global = true)]
    output: Option<String>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic stereo scenes into a dataset directory.
    GenScenes,
    /// Train the stereo model, and the edge estimator when `train.edge_steps > 0`.
    Train,
    /// Evaluate a checkpoint with per-region metrics.
    Eval,
    /// Edge pseudo-label fine-tuning with a plain fine-tuning control.
    Dape,
    /// Finite-difference check of every differentiable stage.
    Gradcheck,
    /// Print the resolved configuration.
    Config,
}

fn run(cli: Cli) -> AppResult<()> {
    let mut overrides = cli.overrides;
    if let Some(o) = cli.output {
        overrides.push(format!("output={:?}", o));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::GenScenes => commands::gen_scenes(&cfg, cli.force),
        Command::Train => commands::train(&cfg, cli.force),
        Command::Eval => commands::eval(&cfg, cli.force),
        Command::Dape => commands::dape(&cfg, cli.force),
        Command::Gradcheck => commands::gradcheck(&cfg, cli.force),
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
