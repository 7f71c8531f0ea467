//! `audiogen` command-line entry point.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "audiogen", version, about = "Latent diffusion text-to-audio toolkit")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random draw in the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for internal parallelism.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Repeat for more log detail on stderr.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train the autoencoder on a directory of stereo WAVs.
    TrainAe(TrainAeArgs),
    /// Train the diffusion transformer on encoded latents and metadata.
    TrainDit(TrainDitArgs),
    /// Generate a WAV from a text prompt.
    Generate(GenerateArgs),
    /// Encode a WAV file or directory to a latent container.
    Encode(EncodeArgs),
    /// Decode a latent container in one pass.
    Decode(DecodeArgs),
    /// Decode a latent container chunk by chunk.
    ChunkDecode(ChunkDecodeArgs),
    /// Reconstruction metrics between two WAV directories.
    EvalRecon(EvalReconArgs),
    /// Generation metrics over supplied embeddings and probabilities.
    EvalGen(EvalGenArgs),
    /// Group near-duplicate embeddings.
    Dedup(DedupArgs),
    /// Rank generations by similarity to the training set.
    MemScan(MemScanArgs),
    /// Build training prompts from JSON-lines metadata.
    BuildPrompts(BuildPromptsArgs),
    /// Flag recordings whose music tags stay active long enough.
    DetectMusic(DetectMusicArgs),
}

#[derive(Args, Debug)]
pub struct TrainAeArgs {
    /// Directory of stereo 44.1 kHz WAVs.
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory for checkpoints and the loss log.
    #[arg(long)]
    pub out: PathBuf,
    /// ae_full or ae_decoder_only.
    #[arg(long, default_value = "ae_full")]
    pub phase: String,
    /// Checkpoint to start from (required for ae_decoder_only).
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainDitArgs {
    /// Latent container written by `encode`.
    #[arg(long)]
    pub latents: PathBuf,
    /// JSON-lines metadata whose ids match the latent names.
    #[arg(long)]
    pub metadata: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Latent frames per training sequence; longer ones are cropped, shorter padded.
    #[arg(long, default_value_t = audiogen::diffusion::GENERATION_FRAMES)]
    pub frames: usize,
    /// Prompt variants drawn per recording.
    #[arg(long, default_value_t = 4)]
    pub variants: usize,
    /// Precomputed text embeddings; the built-in toy embedder otherwise.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 47.0)]
    pub seconds: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Autoencoder checkpoint; untrained weights from the configuration otherwise.
    #[arg(long)]
    pub autoencoder: Option<PathBuf>,
    /// DiT checkpoint; untrained weights from the configuration otherwise.
    #[arg(long)]
    pub dit: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub cfg_scale: Option<f64>,
    /// Latent frames to generate.
    #[arg(long, default_value_t = audiogen::diffusion::GENERATION_FRAMES)]
    pub frames: usize,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EncodeArgs {
    /// WAV file or directory of WAVs.
    #[arg(long)]
    pub input: PathBuf,
    /// Autoencoder checkpoint; untrained weights from the configuration otherwise.
    #[arg(long)]
    pub autoencoder: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Draw from the posterior instead of taking its mean.
    #[arg(long)]
    pub sample: bool,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    #[arg(long)]
    pub latents: PathBuf,
    /// Autoencoder checkpoint; untrained weights from the configuration otherwise.
    #[arg(long)]
    pub autoencoder: Option<PathBuf>,
    /// A `.wav` path for a single sequence, otherwise a directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ChunkDecodeArgs {
    #[arg(long)]
    pub latents: PathBuf,
    /// Autoencoder checkpoint; untrained weights from the configuration otherwise.
    #[arg(long)]
    pub autoencoder: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Latent frames decoded per chunk, overlap included.
    #[arg(long, default_value_t = 64)]
    pub chunk: usize,
    /// Overlap in latent frames; defaults to the decoder's receptive field.
    #[arg(long)]
    pub overlap: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalReconArgs {
    /// Reference WAV directory.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// Estimate WAV directory with the same file names.
    #[arg(long)]
    pub est: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalGenArgs {
    /// Reference-set embeddings (Fréchet distance).
    #[arg(long)]
    pub ref_emb: Option<PathBuf>,
    /// Generated-set embeddings (Fréchet distance).
    #[arg(long)]
    pub gen_emb: Option<PathBuf>,
    /// Per-item label distributions of the references (KL).
    #[arg(long)]
    pub ref_probs: Option<PathBuf>,
    /// Per-item label distributions of the generations (KL).
    #[arg(long)]
    pub gen_probs: Option<PathBuf>,
    /// Per-item prompt embeddings (CLAP-style score).
    #[arg(long)]
    pub text_emb: Option<PathBuf>,
    /// Per-item audio embeddings (CLAP-style score).
    #[arg(long)]
    pub audio_emb: Option<PathBuf>,
    /// CSV with `id,prompt` columns; enables --filter.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// all, no_speech, no_connectors or neither.
    #[arg(long, default_value = "all")]
    pub filter: String,
    /// Tensor name inside every embedding container.
    #[arg(long, default_value = "embeddings")]
    pub tensor: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DedupArgs {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, default_value_t = audiogen::datapipe::DEDUP_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value = "embeddings")]
    pub tensor: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct MemScanArgs {
    #[arg(long)]
    pub gen: PathBuf,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long, default_value_t = audiogen::datapipe::MEMORIZATION_TOP_K)]
    pub k: usize,
    #[arg(long, default_value = "embeddings")]
    pub tensor: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct BuildPromptsArgs {
    #[arg(long)]
    pub metadata: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub variants: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DetectMusicArgs {
    /// Tag timeline JSON file or directory of them.
    #[arg(long)]
    pub timelines: PathBuf,
    /// Text file, one music tag per line.
    #[arg(long)]
    pub music_tags: PathBuf,
    #[arg(long, default_value_t = audiogen::datapipe::MUSIC_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = audiogen::datapipe::MUSIC_MIN_SECONDS)]
    pub min_seconds: f64,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();
    let threads = cli.threads.max(1);
    // candle's matmul threads follow the same variable as rayon's pool
    std::env::set_var("RAYON_NUM_THREADS", threads.to_string());
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        log::warn!("thread pool already initialised: {e}");
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
