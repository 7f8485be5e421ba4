//! Command-line front end for the embedding steering pipeline. Every
//! subcommand reads and writes the formats defined in `sae-steer-core`,
//! prints exactly one JSON result object on stdout, and logs progress to
//! stderr, so the tool composes cleanly in scripts.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, `--help` excepted),
//! 2 invalid data or configuration, 3 I/O or label-service failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use sae_steer_core::sae::InferenceMode;
use sae_steer_core::{autointerp, styling, Error};

#[derive(Parser)]
#[command(
    name = "sae-steer",
    version,
    about = "Train sparse autoencoders on embedding corpora, build style profiles, and steer embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a JSON-lines embedding dump into the binary container
    Ingest(IngestArgs),
    /// Train a sparse autoencoder on an embedding container
    Train(TrainArgs),
    /// Evaluate a checkpoint: R2, mean L0, dead fraction, stable rank
    Diag(DiagArgs),
    /// Encode embeddings into per-concept activation codes
    Encode(EncodeArgs),
    /// Build a style profile from reference codes
    ProfileBuild(ProfileBuildArgs),
    /// Compare two style profiles concept by concept
    ProfileDiff(ProfileDiffArgs),
    /// Shift content embeddings along a profile's decoded residual
    Steer(SteerArgs),
    /// List top exemplars for a concept, or rank concepts by mean activation
    InterpExemplars(ExemplarsArgs),
    /// Request concept labels from a label service or the offline mock
    InterpLabel(LabelArgs),
}

/// Inference mode used when turning embeddings into codes.
#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    /// Keep each sample's k strongest positive pre-activations
    Topk,
    /// Keep every pre-activation above the calibrated threshold
    Threshold,
}

impl From<Mode> for InferenceMode {
    fn from(mode: Mode) -> InferenceMode {
        match mode {
            Mode::Topk => InferenceMode::TopK,
            Mode::Threshold => InferenceMode::Threshold,
        }
    }
}

#[derive(Args)]
struct IngestArgs {
    /// JSON-lines input, one {"id", "uri"?, "embedding": [...]} per line
    #[arg(long)]
    input: PathBuf,
    /// Output embedding container
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training embedding container
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint
    #[arg(long)]
    out: PathBuf,
    /// Optional JSON-lines training history
    #[arg(long)]
    history: Option<PathBuf>,
    /// `key = value` settings file applied before the flags; flags win
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dictionary size M
    #[arg(long)]
    dict: Option<usize>,
    /// Active concepts per sample
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Rows per batch (a short final batch is dropped)
    #[arg(long)]
    batch: Option<usize>,
    /// Peak learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// PRNG seed; required so every run is reproducible on purpose
    #[arg(long)]
    seed: Option<u64>,
    /// Linear warmup steps (default 100)
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    /// Decoupled weight decay (default 0)
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Dead-feature reanimation coefficient (default 1e-3)
    #[arg(long)]
    lambda: Option<f64>,
    /// Batches a concept must stay inactive to count as dead (default 1)
    #[arg(long)]
    dead_window: Option<usize>,
    /// Subtract the dataset mean before training
    #[arg(long)]
    normalize_inputs: bool,
    /// Project decoder rows back to unit norm after every step
    #[arg(long)]
    renormalize_decoder: bool,
}

#[derive(Args)]
struct DiagArgs {
    /// Checkpoint to evaluate
    #[arg(long)]
    model: PathBuf,
    /// Evaluation embedding container
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Topk)]
    mode: Mode,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Embeddings to encode
    #[arg(long)]
    data: PathBuf,
    /// Output code container (same binary format, one column per concept)
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Topk)]
    mode: Mode,
}

#[derive(Args)]
struct ProfileBuildArgs {
    /// Reference code container from `encode`
    #[arg(long)]
    codes: PathBuf,
    /// Output profile JSON
    #[arg(long)]
    out: PathBuf,
    /// Minimum activation frequency for a concept to enter the profile
    #[arg(long, default_value_t = styling::DEFAULT_PRESENCE_THRESHOLD)]
    presence: f64,
    /// Multiplier on each kept concept's mean positive activation
    #[arg(long, default_value_t = styling::DEFAULT_STRENGTH)]
    strength: f64,
}

#[derive(Args)]
struct ProfileDiffArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

#[derive(Args)]
struct SteerArgs {
    #[arg(long)]
    model: PathBuf,
    /// Style profile JSON
    #[arg(long)]
    profile: PathBuf,
    /// Content embedding container; every row is steered
    #[arg(long)]
    content: PathBuf,
    /// Steering gain
    #[arg(long, default_value_t = styling::DEFAULT_ALPHA)]
    alpha: f64,
    /// Output embedding container
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(group(ArgGroup::new("selector").required(true).args(["concept", "rank"])))]
struct ExemplarsArgs {
    /// Reference code container from `encode`
    #[arg(long)]
    codes: PathBuf,
    /// Show the top exemplars of this concept
    #[arg(long)]
    concept: Option<usize>,
    /// Rank the top N concepts by mean activation instead
    #[arg(long)]
    rank: Option<usize>,
    /// Exemplars to keep
    #[arg(long, default_value_t = autointerp::DEFAULT_EXEMPLAR_COUNT)]
    k: usize,
}

#[derive(Args)]
#[command(
    group(ArgGroup::new("selection").required(true).args(["concept", "top"])),
    group(ArgGroup::new("client").required(true).args(["mock", "endpoint"]))
)]
struct LabelArgs {
    /// Reference code container from `encode`
    #[arg(long)]
    codes: PathBuf,
    /// Output JSON-lines label file
    #[arg(long)]
    out: PathBuf,
    /// Concept index to label; repeat the flag for several (duplicates collapse)
    #[arg(long)]
    concept: Vec<usize>,
    /// Label the top N concepts by mean activation instead
    #[arg(long)]
    top: Option<usize>,
    /// Exemplars sent per concept
    #[arg(long, default_value_t = autointerp::DEFAULT_EXEMPLAR_COUNT)]
    k: usize,
    /// Use the offline mock labeler
    #[arg(long)]
    mock: bool,
    /// Label-service URL
    #[arg(long)]
    endpoint: Option<String>,
    /// Label-service request timeout
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
}

fn failure_code(err: &Error) -> u8 {
    match err {
        Error::InvalidData(_) => 2,
        Error::Io { .. } | Error::Transport(_) => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here as "errors" but print to stdout
            // and succeed; genuine usage mistakes go to stderr with code 1.
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli.command) {
        Ok(output) => {
            println!("{output}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(failure_code(&err))
        }
    }
}
