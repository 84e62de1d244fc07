//! `stats`: synthesise corpora, train and evaluate captioners, inspect attention.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stats_core::model::{Branch, TemporalScheme};

#[derive(Parser, Debug)]
#[command(name = "stats", version, about = "Spatio-temporal / temporo-spatial attention video captioning")]
struct Cli {
    /// Log progress (per-epoch losses and scores) to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Root seed for every random stream.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Training flags shared by `train` and `ablate`.
#[derive(Args, Debug, Clone, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Cross-entropy epochs before self-critical fine-tuning.
    #[arg(long)]
    pub ce_epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Weight of the cross-entropy term during self-critical epochs.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Weight of the ranked loss.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Scheduled-sampling decay constant.
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub attention_dim: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (features, manifest, labels).
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Total number of videos.
        #[arg(long)]
        videos: Option<usize>,
        /// Videos held out for validation (taken from the end).
        #[arg(long)]
        val_videos: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        cols: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train a captioner; writes one checkpoint per epoch and a CSV log.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        /// Corpus directory (with manifest.json).
        #[arg(long)]
        corpus: PathBuf,
        /// Output directory for checkpoints, log.csv and the resolved config.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_scheme)]
        scheme: Option<TemporalScheme>,
        #[arg(long, value_parser = parse_branch)]
        branch: Option<Branch>,
    },
    /// Score captions against corpus references (BLEU4, ROUGE-L, CIDEr).
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        /// train, val or test.
        #[arg(long, default_value = "val")]
        split: String,
        /// Caption JSON lines to score.
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        captions: Option<PathBuf>,
        /// Greedy-decode the split with this checkpoint instead.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Caption feature files; prints one JSON line per file.
    Caption {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Feature files (.stft).
        #[arg(required = true)]
        features: Vec<PathBuf>,
        /// Sample instead of greedy decoding.
        #[arg(long)]
        sample: bool,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        max_len: Option<usize>,
        /// Include per-word attention weights.
        #[arg(long)]
        dumps: bool,
    },
    /// Write the per-word attention weights of a greedy caption as JSON.
    DumpAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Solve the convex rank-SVM problem for a frame sequence.
    Oracle {
        #[command(flatten)]
        common: Common,
        /// JSON array of frames (each an array of numbers); a random separable
        /// sequence is drawn from the seed when absent.
        #[arg(long)]
        frames: Option<PathBuf>,
        /// Length of the random sequence.
        #[arg(long, default_value_t = 8)]
        length: usize,
        /// Dimension of the random sequence.
        #[arg(long, default_value_t = 4)]
        dim: usize,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long, default_value_t = 1.0)]
        margin: f64,
    },
    /// Train every temporal scheme on every branch and write a comparison CSV.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        corpus: PathBuf,
        /// Output CSV; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads (results do not depend on it).
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
}

fn parse_scheme(s: &str) -> Result<TemporalScheme, String> {
    s.parse().map_err(|e: stats_core::Error| e.to_string())
}

fn parse_branch(s: &str) -> Result<Branch, String> {
    s.parse().map_err(|e: stats_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Synth {
            common,
            out,
            videos,
            val_videos,
            frames,
            dim,
            rows,
            cols,
            noise,
        } => commands::synth(
            &common,
            &out,
            commands::SynthFlags {
                videos,
                val_videos,
                frames,
                dim,
                rows,
                cols,
                noise,
            },
        ),
        Command::Train {
            common,
            train,
            corpus,
            out,
            scheme,
            branch,
        } => commands::train(&common, &train, &corpus, &out, scheme, branch),
        Command::Evaluate {
            common,
            corpus,
            split,
            captions,
            checkpoint,
            max_len,
        } => commands::evaluate(&common, &corpus, &split, captions.as_deref(), checkpoint.as_deref(), max_len),
        Command::Caption {
            common,
            checkpoint,
            features,
            sample,
            temperature,
            max_len,
            dumps,
        } => commands::caption(&common, &checkpoint, &features, sample, temperature, max_len, dumps),
        Command::DumpAttention {
            common,
            checkpoint,
            features,
            out,
            max_len,
        } => commands::dump_attention(&common, &checkpoint, &features, out.as_deref(), max_len),
        Command::Oracle {
            common,
            frames,
            length,
            dim,
            lambda,
            margin,
        } => commands::oracle(&common, frames.as_deref(), length, dim, lambda, margin),
        Command::Ablate {
            common,
            train,
            corpus,
            out,
            threads,
        } => commands::ablate(&common, &train, &corpus, out.as_deref(), threads),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
