use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use exnet_cli::commands::{cmd_dump_graph, cmd_gradcheck, cmd_train, cmd_train_a, RunOptions};
use exnet_cli::CliError;

/// Train and audit extraction networks.
///
/// Log verbosity is read from EXNET_LOG (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "exnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with per-trial extraction propagation.
    Train(Common),
    /// Train with cached extraction tables, epochs and aeons.
    TrainA(Common),
    /// Compare analytic gradients against finite differences.
    Gradcheck(Common),
    /// Write the configured graph as DOT.
    DumpGraph(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run config.
    config: PathBuf,
    /// Output directory (overrides output.dir).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Derive all seeds from this value.
    #[arg(long)]
    seed_override: Option<u64>,
}

impl Common {
    fn options(&self) -> RunOptions {
        RunOptions { out: self.out.clone(), seed_override: self.seed_override }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(c) => cmd_train(&c.config, &c.options())
            .map(|s| println!("{} trials; mean loss {:.4e} -> {:.4e}", s.trials, s.mean_loss_first, s.mean_loss_last)),
        Command::TrainA(c) => cmd_train_a(&c.config, &c.options()).map(|s| {
            let last = s.aeons.last().map_or(s.initial_mean_loss, |a| a.mean_loss);
            println!("{} aeons; mean loss {:.4e} -> {last:.4e}", s.aeons.len(), s.initial_mean_loss)
        }),
        Command::Gradcheck(c) => cmd_gradcheck(&c.config, &c.options()).map(|_| ()),
        Command::DumpGraph(c) => cmd_dump_graph(&c.config, &c.options()).map(|_| ()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("EXNET_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
