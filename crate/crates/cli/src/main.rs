//! `pipnet`: batch entry points for data generation, two-stage training,
//! evaluation, explanation export, shortcut detection, disabling,
//! counterfactual evaluation and serving.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "pipnet", version, about = "Part-prototype classifier pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone)]
pub struct Common {
    /// key=value file overriding defaults; unknown keys are rejected
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; must be empty or absent unless --force
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    /// Allow writing into a non-empty output directory
    #[arg(long, global = true)]
    pub force: bool,
}

#[derive(Args, Debug, Clone)]
pub struct ModelInput {
    /// Checkpoint directory written by pretrain, train or disable
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory written by gen-data
    #[arg(long)]
    pub dataset: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct ThresholdArgs {
    /// Presence above which a prototype counts as active in an image
    #[arg(long, default_value_t = 0.1)]
    pub presence_thr: f32,
    /// Minimum fraction of activations on the artifact to flag a prototype
    #[arg(long, default_value_t = 0.2)]
    pub overlap_thr: f64,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic two-class dataset with artifact masks
    GenData {
        /// `default` or a key=value spec file
        #[arg(long, default_value = "default")]
        spec: String,
    },
    /// Self-supervised prototype pretraining on the train split
    Pretrain {
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Scoring-sheet training starting from a pretrained checkpoint
    Train {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Metrics of a checkpoint on one split
    Eval {
        #[command(flatten)]
        input: ModelInput,
        #[arg(long, default_value = "test")]
        subset: String,
    },
    /// Export prototype patch crops, the global explanation and local
    /// explanations of the test split
    Explain {
        #[command(flatten)]
        input: ModelInput,
        /// Patches per prototype
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Flag prototypes whose patches land on artifact masks (train split)
    DetectShortcuts {
        #[command(flatten)]
        input: ModelInput,
        #[command(flatten)]
        thresholds: ThresholdArgs,
    },
    /// Disable prototypes and write the adapted checkpoint with its log
    Disable {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated prototype ids
        #[arg(long, value_delimiter = ',', required = true)]
        prototypes: Vec<usize>,
        /// Name recorded in the intervention log
        #[arg(long, default_value = "cli")]
        actor: String,
    },
    /// Compare the model with and without the given (or detected)
    /// prototypes on clean and artifact-inserted test images
    Counterfactual {
        #[command(flatten)]
        input: ModelInput,
        /// Comma-separated ids; detected on the train split when omitted
        #[arg(long, value_delimiter = ',')]
        prototypes: Option<Vec<usize>>,
        #[command(flatten)]
        thresholds: ThresholdArgs,
    },
    /// Serve the workbench HTTP API
    Serve {
        #[command(flatten)]
        input: ModelInput,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: std::net::SocketAddr,
        /// JSON-lines file that receives intervention log entries
        #[arg(long)]
        log: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli.command, &cli.common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(1)
        }
    }
}
