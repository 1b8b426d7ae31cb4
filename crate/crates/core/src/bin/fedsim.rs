use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedsim::cli;

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Federated learning simulator with diverse selection and adaptive compression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replace a config field, e.g. `--override seed=7`. Repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory; overrides `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare time and traffic to a target accuracy across run directories.
    Compare {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        #[arg(long)]
        target: f64,
    },
    /// Print per-client class histograms of the configured partition.
    PartitionPreview {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Write the client → sample-index mapping as JSON.
        #[arg(long)]
        export: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    let code = match cli.command {
        Command::Run { config, overrides, out } => cli::cmd_run(&config, &overrides, out.as_deref()),
        Command::Compare { run_dirs, target } => cli::cmd_compare(&run_dirs, target, &mut stdout),
        Command::PartitionPreview { config, overrides, export } => {
            cli::cmd_partition_preview(&config, &overrides, export.as_deref(), &mut stdout)
        }
    };
    ExitCode::from(code as u8)
}
