use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use waffle_cli::{count_params, load_config, run_experiment, run_mia, run_sweep, RunOutcome};

/// Federated learning simulator with per-client networks built from a shared factor dictionary.
#[derive(Parser)]
#[command(name = "waffle", version)]
struct Cli {
    /// Overrides `fed.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its artifacts.
    Run { config: PathBuf },
    /// Train every cell of a `sweep.*` grid, one subdirectory per cell.
    Sweep { config: PathBuf },
    /// Run the membership-inference comparison.
    Mia { config: PathBuf },
    /// Print the trainable parameter count of a model preset.
    CountParams { preset: String, algorithm: String },
}

fn describe(o: &RunOutcome) -> String {
    match &o.summary {
        None => format!("no evaluation; artifacts in {}", o.out_dir.display()),
        Some(s) => {
            let mut line = format!("round {}: mean accuracy {:.2}%", s.round, s.mean);
            if let (Some(maj), Some(min)) = (s.majority, s.minority) {
                line.push_str(&format!(", majority {maj:.2}%, minority {min:.2}%"));
            }
            format!("{line}; artifacts in {}", o.out_dir.display())
        }
    }
}

fn execute(cli: Cli) -> waffle_cli::Result<()> {
    let out_dir = cli.out_dir.as_deref();
    match cli.command {
        Command::Run { config } => {
            let outcome = run_experiment(&load_config(&config, cli.seed, out_dir)?)?;
            println!("{}", describe(&outcome));
        }
        Command::Sweep { config } => {
            for (name, outcome) in run_sweep(&load_config(&config, cli.seed, out_dir)?)? {
                println!("{name}: {}", describe(&outcome));
            }
        }
        Command::Mia { config } => {
            for (algorithm, report) in run_mia(&load_config(&config, cli.seed, out_dir)?)? {
                println!(
                    "{algorithm}: attack accuracy {:.4}, F1 {:.4}",
                    report.accuracy, report.f1
                );
            }
        }
        Command::CountParams { preset, algorithm } => println!("{}", count_params(&preset, &algorithm)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
