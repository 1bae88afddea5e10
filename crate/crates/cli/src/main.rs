use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dama_cli::spec::{Overrides, Scale};
use dama_cli::{experiment, load_spec, verify, EXIT_ALL_DIVERGED, EXIT_FAILURE, EXIT_OK, EXIT_SPEC};

#[derive(Parser)]
#[command(name = "dama", version, about = "Decentralized stochastic minimax experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Output directory (overrides `out` in the spec).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Base seed (overrides `seed` in the spec).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Problem sizes: `paper` (K=20, d=100, N=2000) or `desk` (K=8, d=16, N=200).
    #[arg(long, global = true, value_parser = parse_scale)]
    scale: Option<Scale>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every estimator × strategy × topology × repetition cell of a spec.
    Run { spec: PathBuf },
    /// Check the update forms and the transformed recursion on a small copy of a spec.
    Verify { spec: PathBuf },
}

fn parse_scale(s: &str) -> Result<Scale, String> {
    s.parse()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let overrides = Overrides { seed: cli.seed, scale: cli.scale, out: cli.out };
    let path = match &cli.command {
        Command::Run { spec } | Command::Verify { spec } => spec,
    };
    let spec = match load_spec(path, &overrides) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_SPEC as u8);
        }
    };
    let code = match cli.command {
        Command::Run { .. } => match experiment::run_experiment(&spec) {
            Ok(outcome) => {
                let n = outcome.results.len();
                let diverged = outcome.diverged_count();
                println!("{n} cells written to {} ({diverged} diverged)", spec.out.display());
                if outcome.all_diverged() {
                    eprintln!("every cell diverged");
                    EXIT_ALL_DIVERGED
                } else {
                    EXIT_OK
                }
            }
            Err(e) => {
                eprintln!("error: {e:#}");
                EXIT_FAILURE
            }
        },
        Command::Verify { .. } => match verify::verify(&spec) {
            Ok(report) => {
                print!("{report}");
                if let Err(e) = std::fs::create_dir_all(&spec.out)
                    .and_then(|_| std::fs::write(spec.out.join("verify_report.txt"), report.to_string()))
                {
                    eprintln!("warning: could not write the report: {e}");
                }
                match report.failures().next() {
                    None => EXIT_OK,
                    Some(c) => {
                        eprintln!("verification failed: {} [{}]", c.invariant, c.scope);
                        EXIT_FAILURE
                    }
                }
            }
            Err(e) => {
                eprintln!("error: {e:#}");
                EXIT_FAILURE
            }
        },
    };
    ExitCode::from(code as u8)
}
