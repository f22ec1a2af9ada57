use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "cmreid", version, about = "Cross-modal person re-identification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic visible/thermal dataset.
    Synth(SynthArgs),
    /// Train the toy two-stream model.
    Train(TrainArgs),
    /// Extract embeddings for a dataset with a trained model.
    Embed(EmbedArgs),
    /// Shortest-path aligned distances between two stripe banks.
    Align(AlignArgs),
    /// Evaluate query/gallery banks (rank-1/10/20, mAP, mINP).
    Eval(EvalArgs),
    /// Write ECN re-ranked query/gallery distances.
    Rerank(RerankArgs),
    /// Train and evaluate over a grid of part counts or embedding sizes.
    Ablate(AblateArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Identities in the training set.
    #[arg(long)]
    pub ids: usize,
    /// Samples per identity and modality.
    #[arg(long, default_value_t = 10)]
    pub per_id: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Extra identities written to `<out>/holdout`.
    #[arg(long, default_value_t = 0)]
    pub holdout_ids: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// key = value training config; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_model: PathBuf,
    /// Per-step loss log (CSV).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args)]
pub struct EmbedArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for `<modality>.cmre` and `<modality>.stripes.cmre`.
    #[arg(long)]
    pub out: PathBuf,
    /// Global feature to write.
    #[arg(long, value_enum, default_value_t = commands::Feature::Enhanced)]
    pub feature: commands::Feature,
}

#[derive(Args)]
pub struct AlignArgs {
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub parts: usize,
    /// Write the distance matrix here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone)]
pub struct DistanceArgs {
    #[arg(long)]
    pub query: PathBuf,
    #[arg(long)]
    pub gallery: PathBuf,
    /// Treat rows as flattened stripe sets compared by aligned distance.
    #[arg(long)]
    pub use_align: bool,
    /// Stripes per row for `--use-align`.
    #[arg(long, default_value_t = 3)]
    pub parts: usize,
    #[arg(long, default_value_t = 3)]
    pub top_t: usize,
    #[arg(long, default_value_t = 8)]
    pub expand_q: usize,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub dist: DistanceArgs,
    /// Apply ECN re-ranking before scoring.
    #[arg(long)]
    pub rerank: bool,
    #[arg(long, default_value_t = 10)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random queries kept per identity in each repeat.
    #[arg(long)]
    pub query_shots: Option<usize>,
    /// Random gallery items kept per identity in each repeat.
    #[arg(long)]
    pub gallery_shots: Option<usize>,
    /// Ignore same-identity gallery items from the query's camera.
    #[arg(long)]
    pub camera_filter: bool,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args)]
pub struct RerankArgs {
    #[command(flatten)]
    pub dist: DistanceArgs,
    /// Write the re-ranked matrix here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct AblateArgs {
    /// `parts=2..9`, `parts=1,3` or `dim=128,256,512,1024`.
    #[arg(long, default_value = "parts=2..9")]
    pub sweep: String,
    /// Training dataset; evaluation uses `<data>/holdout`. Synthesised when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub ids: usize,
    #[arg(long, default_value_t = 10)]
    pub holdout_ids: usize,
    #[arg(long, default_value_t = 10)]
    pub per_id: usize,
    /// Base training config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Train(a) => commands::train(&a),
        Command::Embed(a) => commands::embed(&a),
        Command::Align(a) => commands::align(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Rerank(a) => commands::rerank(&a),
        Command::Ablate(a) => commands::ablate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<commands::UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
