mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use relit_core::Error;

/// Backlit photo enhancement with learned prompt pairs.
#[derive(Parser, Debug)]
#[command(name = "relit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Compute device; only `cpu` is built in.
    #[arg(long)]
    pub device: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the full alternating training schedule.
    Train {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory (overrides `paths.checkpoint_dir`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory (overrides `paths.out_dir`).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Continue from the newest checkpoint instead of starting over.
        #[arg(long)]
        resume: bool,
    },
    /// Enhance every image in a directory.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Enhancer file, checkpoint directory or checkpoint root.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write a side-by-side comparison grid.
        #[arg(long)]
        grid: bool,
    },
    /// Full-reference metrics of enhanced images against references.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Enhanced images.
        #[arg(long)]
        input: PathBuf,
        /// Reference images with matching file names.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Report directory.
        #[arg(long)]
        output: PathBuf,
    },
    /// Similarity-score statistics of image pools under a prompt pair.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Prompt file, checkpoint directory or checkpoint root.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pool directory; repeat for several pools.
        #[arg(long, required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

/// 2 for configuration, data and checkpoint problems, 3 for a non-finite
/// loss, 1 for anything else.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteLoss { .. } => 3,
        Error::Config(_)
        | Error::Shape(_)
        | Error::Validation(_)
        | Error::State(_)
        | Error::Integrity { .. }
        | Error::UnknownEntry { .. }
        | Error::Decode { .. } => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            common,
            checkpoint,
            output,
            resume,
        } => commands::train(&common, checkpoint, output, resume),
        Command::Infer {
            common,
            checkpoint,
            input,
            output,
            grid,
        } => commands::infer(&common, &checkpoint, &input, &output, grid),
        Command::Eval {
            common,
            input,
            reference,
            output,
        } => commands::eval(&common, &input, reference.as_deref(), &output),
        Command::Analyze {
            common,
            checkpoint,
            input,
            output,
        } => commands::analyze(&common, &checkpoint, &input, &output),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
