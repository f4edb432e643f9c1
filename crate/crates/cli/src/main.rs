use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmfb::error::ErrorKind;

mod commands;
mod imageio;

/// Interleaved image-text model with diffusion-feedback regularization.
///
/// Configuration keys may be overridden with `MMFB_` environment variables;
/// nested keys are joined with `__` (e.g. `MMFB_STAGE__S1__TOTAL_STEPS=200`).
#[derive(Debug, Parser)]
#[command(name = "mmfb", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the synthetic shapes dataset (train pairs + OOD labeled images).
    SynthData(SynthArgs),
    /// Run one training stage from a config file.
    Train(TrainArgs),
    /// Continue a text prompt; `<SOI>` triggers image sampling.
    Generate(GenerateArgs),
    /// Partially noise an image and denoise it back.
    Reconstruct(ReconstructArgs),
    /// Mine hard negatives and render benchmark items.
    BuildBenchmark(BenchmarkArgs),
    /// Score answers (given, or produced by a checkpoint) against a benchmark.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args, serde::Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 600)]
    pub n_train: usize,
    #[arg(long, default_value_t = 120)]
    pub n_ood: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub resolution: usize,
    /// Probability that a caption names the shape.
    #[arg(long, default_value_t = 0.0)]
    pub caption_shape_rate: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// s1, s2 or s3.
    #[arg(long)]
    pub stage: String,
    /// Checkpoint to start from; its optimizer state is resumed when it was
    /// written by the same stage.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Overrides `output_dir` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub max_tokens: usize,
    #[arg(long, default_value_t = 1)]
    pub max_images: usize,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 50)]
    pub top_k: usize,
    #[arg(long, default_value_t = 3.0)]
    pub guidance_scale: f64,
    #[arg(long, default_value_t = 50)]
    pub sample_steps: usize,
    /// Emit `<SOI>` as the first generated token.
    #[arg(long)]
    pub force_image: bool,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// `.f32t` tensor or `.png` image.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long, default_value_t = 0.65)]
    pub noise_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct BenchmarkArgs {
    /// Labeled images, one `{image_ref, gt_label, split?, embedding?}` per line.
    #[arg(long)]
    pub labels: PathBuf,
    /// Label prototypes `{label, embedding}` and optional image embeddings
    /// `{image_ref, embedding}`.
    #[arg(long)]
    pub embeddings: PathBuf,
    /// yesno, multichoice-gt-first or multichoice-neg-first.
    #[arg(long)]
    pub format: String,
    /// Output directory; receives `benchmark.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, serde::Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub benchmark: PathBuf,
    /// `{item_id, raw_output}` per line. Without it, `--checkpoint` answers.
    #[arg(long, conflicts_with = "checkpoint")]
    pub answers: Option<PathBuf>,
    #[arg(long, required_unless_present = "answers")]
    pub checkpoint: Option<PathBuf>,
    /// Directory that image refs are relative to. Defaults to the one recorded
    /// by build-benchmark, else the benchmark's directory.
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub max_tokens: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match &cli.command {
        Command::SynthData(a) => commands::synth_data(a),
        Command::Train(a) => commands::train(a),
        Command::Generate(a) => commands::generate(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::BuildBenchmark(a) => commands::build_benchmark(a),
        Command::Evaluate(a) => commands::evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
