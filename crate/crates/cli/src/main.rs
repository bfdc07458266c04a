use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use ecotune::driver::{self, DriverError, RunSpec, Tuner};
use ecotune::space::{default_space, Configuration};

/// Tune text-generation request settings under a token budget.
#[derive(Parser)]
#[command(name = "ecotune", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search for the best configuration within the run spec's budgets.
    Tune {
        #[arg(long)]
        run_spec: PathBuf,
        /// Continue the run recorded in this log, appending to it.
        #[arg(long, conflicts_with = "log")]
        resume: Option<PathBuf>,
        /// Override the spec's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the trial log here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate one fixed configuration.
    Eval {
        #[arg(long)]
        run_spec: PathBuf,
        /// JSON file holding the configuration.
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarize a trial log.
    Report {
        #[arg(long)]
        log: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
    /// Print a search space declaration.
    Space {
        /// The built-in default space.
        #[arg(long, required = true)]
        default: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Records,
}

const NO_VALID: u8 = 3;

fn fail(e: DriverError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn emit(text: &str) {
    // A closed pipe (e.g. `| head`) is not an error worth reporting.
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json<T: serde::Serialize>(value: &T) {
    emit(&(serde_json::to_string_pretty(value).expect("output serializes") + "\n"));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Tune {
            run_spec,
            resume,
            seed,
            log,
        } => {
            let mut spec = match RunSpec::load(&run_spec) {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            if let Some(seed) = seed {
                spec.seed = seed;
            }
            let report = match &resume {
                Some(path) => driver::resume(spec, path),
                None => driver::run(spec, log.as_deref()),
            };
            match report {
                Ok(report) => {
                    print_json(&report);
                    if report.best.is_none() {
                        eprintln!("no valid configuration found within the budget");
                        ExitCode::from(NO_VALID)
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(e) => fail(e),
            }
        }
        Command::Eval { run_spec, config } => {
            let outcome = RunSpec::load(&run_spec).and_then(|spec| {
                let text = std::fs::read_to_string(&config)?;
                let config: Configuration = serde_json::from_str(&text)
                    .map_err(|e| DriverError::Spec(format!("{}: {e}", config.display())))?;
                Tuner::new(spec)?.evaluate_once(&config)
            });
            match outcome {
                Ok(outcome) => {
                    print_json(&outcome.result);
                    if outcome.result.valid {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(NO_VALID)
                    }
                }
                Err(e) => fail(e),
            }
        }
        Command::Report { log, format } => match driver::summarize(&log) {
            Ok(summary) => {
                match format {
                    Format::Text => emit(&driver::render_summary(&summary)),
                    Format::Records => print_json(&summary),
                }
                ExitCode::SUCCESS
            }
            Err(e) => fail(e),
        },
        Command::Space { .. } => {
            print_json(&default_space());
            ExitCode::SUCCESS
        }
    }
}
