use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedar_core::analysis::staleness_contribution_experiment;
use fedar_core::output::{self, SweepSpec, SHAPLEY_FILE};
use fedar_core::strategies::StrategyKind;
use fedar_core::{Error, ExperimentConfig};

const EXIT_VALIDATION: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_RUNTIME: u8 = 4;
const EXIT_SWEEP: u8 = 5;

#[derive(Parser)]
#[command(name = "fedar", version, about = "Federated-learning simulator with stale-update aggregation")]
struct Cli {
    /// Only log errors.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Replace the config's seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Replace the config's strategy.
    #[arg(long)]
    strategy: Option<StrategyKind>,
}

impl Overrides {
    fn apply(&self, config: &mut ExperimentConfig) {
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(strategy) = self.strategy {
            config.strategy = strategy;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run every (axis value, strategy, seed) cell of a sweep.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Shapley contributions of a client that goes stale for the last
    /// rounds, one report per staleness level.
    Shapley {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Client that goes stale.
        #[arg(long, default_value_t = 0)]
        stale_client: usize,
        /// Staleness levels; 0 is the fresh case.
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2, 3, 4, 5, 6])]
        levels: Vec<usize>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Recompute stats.csv and ttest.csv from existing run directories.
    Report {
        /// Run directories, or roots searched for them.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } => EXIT_IO,
        Error::Csv(e) if e.is_io_error() => EXIT_IO,
        Error::Protocol { .. } => EXIT_RUNTIME,
        Error::Config { .. }
        | Error::Data(_)
        | Error::Format(_)
        | Error::Partition(_)
        | Error::Capacity(_)
        | Error::Csv(_)
        | Error::Json(_) => EXIT_VALIDATION,
    }
}

fn load_config(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig, Error> {
    let mut config = ExperimentConfig::load(path)?;
    overrides.apply(&mut config);
    config.validate()?;
    Ok(config)
}

fn execute(command: Command) -> Result<u8, Error> {
    match command {
        Command::Run { config, out, overrides } => {
            let config = load_config(&config, &overrides)?;
            let result = output::run_command(&config, &out)?;
            let last = result.final_record();
            log::info!(
                "{} finished: loss {:.6}, test accuracy {:.4}",
                config.strategy,
                last.global_train_loss,
                last.global_test_accuracy
            );
            Ok(0)
        }
        Command::Sweep { config, out } => {
            let spec = SweepSpec::load(&config)?;
            let outcomes = output::sweep_command(&spec, &out)?;
            let failed = outcomes.iter().filter(|o| o.outcome.is_err()).count();
            if failed > 0 {
                log::error!("{failed} of {} sweep cells failed", outcomes.len());
                return Ok(EXIT_SWEEP);
            }
            log::info!("{} sweep cells finished", outcomes.len());
            Ok(0)
        }
        Command::Shapley {
            config,
            out,
            stale_client,
            levels,
            overrides,
        } => {
            let config = load_config(&config, &overrides)?;
            let reports = staleness_contribution_experiment(&config, stale_client, &levels)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            output::write_shapley_csv(&out.join(SHAPLEY_FILE), &reports)?;
            for l in &reports {
                log::info!(
                    "level {}: client {stale_client} share {:.2}%",
                    l.level,
                    l.report.percentages[stale_client]
                );
            }
            Ok(0)
        }
        Command::Report { inputs, out } => {
            let report = output::report_command(&inputs, &out)?;
            log::info!(
                "{} strategies, {} t-tests written to {}",
                report.stats.len(),
                report.ttests.len(),
                out.display()
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
