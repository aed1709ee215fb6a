use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dpfl::cli::{self, Overrides};
use dpfl::Strategy;

#[derive(Parser)]
#[command(name = "dpfl", version, about = "Decentralized personalized federated learning simulator")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write metrics.csv plus the effective config.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// score, random, local_only or plain_average
        #[arg(long)]
        strategy: Option<Strategy>,
    },
    /// Run every strategy/seed cell of an experiment spec and summarize.
    Compare { spec: PathBuf },
    /// Record how each selected peer's model does on one client's test data.
    ValidateSelection {
        config: PathBuf,
        #[arg(long)]
        client: usize,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        strategy: Option<Strategy>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let result = match args.command {
        Command::Run {
            config,
            seed,
            out,
            strategy,
        } => cli::cmd_run(&config, &out, &Overrides { seed, strategy }),
        Command::Compare { spec } => cli::cmd_compare(&spec),
        Command::ValidateSelection {
            config,
            client,
            out,
            seed,
            strategy,
        } => cli::cmd_validate_selection(&config, client, &out, &Overrides { seed, strategy }),
    };
    match result {
        Ok(path) => {
            println!("{}", path.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
