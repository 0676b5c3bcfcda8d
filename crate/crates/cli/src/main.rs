use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dpfl_cli::commands::{self, Options, ProbeKind};
use dpfl_cli::config::ConfigError;

/// Differentially private federated learning simulator.
#[derive(Parser)]
#[command(name = "dpfl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key=value config file, or a run manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable, applied in order.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Master seed; overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for client training. Does not change any output.
    #[arg(long)]
    workers: Option<usize>,
}

impl Common {
    fn options(self) -> Options {
        let workers = self
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        Options {
            config: self.config,
            set: self.set,
            out: self.out,
            seed: self.seed,
            workers: workers.max(1),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Probe {
    Sharpness,
    Landscape,
}

#[derive(Subcommand)]
enum Command {
    /// Run federated training and write records, model and privacy report.
    Train(Common),
    /// Tabulate the privacy budget against the number of rounds.
    Budget {
        #[command(flatten)]
        common: Common,
        /// Round counts: a comma list, with inclusive ranges as START..END:STEP.
        #[arg(long)]
        rounds: Option<String>,
    },
    /// Probe the loss landscape around a saved model.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "sharpness")]
        probe: Probe,
    },
    /// Summarize the client partition a config produces.
    PartitionAudit(Common),
}

fn main() -> ExitCode {
    let result = match Cli::parse().command {
        Command::Train(common) => commands::train(&common.options()),
        Command::Budget { common, rounds } => {
            commands::budget(&common.options(), rounds.as_deref())
        }
        Command::Probe {
            common,
            model,
            probe,
        } => {
            let kind = match probe {
                Probe::Sharpness => ProbeKind::Sharpness,
                Probe::Landscape => ProbeKind::Landscape,
            };
            commands::probe(&common.options(), &model, kind)
        }
        Command::PartitionAudit(common) => commands::partition_audit(&common.options()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
