use std::path::PathBuf;
use std::process;

use clap::{Args, Parser, Subcommand};

use chatty_cli::commands::{self, GlobalOpts};
use chatty_cli::exit;
use chatty_core::verify::VerifyOptions;

#[derive(Parser)]
#[command(
    name = "chatty",
    version,
    about = "Domain adaptation experiments with transport heads"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Output directory (defaults to the config's out_dir, or "." for scatter).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training seed; overrides CHATTY_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics, snapshots and a checkpoint.
    Train { config: PathBuf },
    /// Train several configurations on one dataset and overlay their curves.
    Compare {
        #[arg(required = true, num_args = 2..)]
        configs: Vec<PathBuf>,
    },
    /// Scatter plots of logit snapshots coloured by class.
    Scatter {
        #[arg(long)]
        labels: PathBuf,
        /// Project onto two principal axes regardless of the column count.
        #[arg(long)]
        pca: bool,
        #[arg(required = true)]
        snapshots: Vec<PathBuf>,
    },
    /// Run the gradient-check and oracle suite.
    Verify {
        /// Flip the reversal node's backward sign (mutation check).
        #[arg(long, hide = true)]
        inject_reversal_fault: bool,
    },
}

fn main() {
    let cli = Cli::parse();
    let opts = GlobalOpts {
        out: cli.global.out,
        seed: cli.global.seed,
        quiet: cli.global.quiet,
    };
    let result = match cli.command {
        Command::Train { config } => commands::cmd_train(&config, &opts).map(drop),
        Command::Compare { configs } => commands::cmd_compare(&configs, &opts).map(drop),
        Command::Scatter {
            labels,
            pca,
            snapshots,
        } => commands::cmd_scatter(&snapshots, &labels, pca, &opts).map(drop),
        Command::Verify {
            inject_reversal_fault,
        } => commands::cmd_verify(
            &opts,
            VerifyOptions {
                reversal_fault: inject_reversal_fault,
            },
        )
        .map(drop),
    };
    match result {
        Ok(()) => process::exit(exit::OK),
        Err(e) => {
            eprintln!("chatty: {e}");
            process::exit(e.exit_code());
        }
    }
}
