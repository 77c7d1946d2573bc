//! `dcsep`: mix synthetic corpora, train separation models, separate
//! mixtures offline or with a streaming buffer, score estimates, and report
//! latency. Exit codes: 0 success, 1 runtime error, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;

#[derive(Parser)]
#[command(name = "dcsep", version, about = "Deep-clustering speech separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Offline,
    Online,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a train/val/test corpus of two-speaker mixtures
    Mix {
        /// Dataset config file (key = value)
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Directory to write wavs and manifests into
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        /// Corpus seed; fixed seed gives a bit-identical corpus
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a separation model and write the best checkpoint
    Train {
        /// Training mixture manifest (JSON lines)
        #[arg(long, value_name = "FILE")]
        train_manifest: PathBuf,
        /// Validation mixture manifest (JSON lines)
        #[arg(long, value_name = "FILE")]
        val_manifest: PathBuf,
        /// Model config file (key = value)
        #[arg(long, value_name = "FILE")]
        config: PathBuf,
        /// Output model path (written atomically)
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Training log path (JSON lines); defaults to <out>.log.jsonl
        #[arg(long, value_name = "FILE")]
        log: Option<PathBuf>,
        /// Continue on doubled sequence length after stage 1 converges
        /// (8 ms window config only)
        #[arg(long)]
        curriculum: bool,
        /// Cap epochs per stage, overriding the config file
        #[arg(long, value_name = "N")]
        max_epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Separate a mixture wav into per-source estimate wavs
    Separate {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        /// Mixture wav (16-bit PCM mono, 8 kHz)
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Optional model config; its buffer_ms is the default when
        /// --buffer-ms is absent, and its framing must match the model
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        /// Directory for source wavs and metadata.json
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Offline)]
        mode: Mode,
        /// Online only: leading buffer used to estimate cluster centres
        #[arg(long, value_name = "MS")]
        buffer_ms: Option<f64>,
        /// Online only: estimate centres from this wav instead of the
        /// input's own head, so separation covers the input from sample 0
        #[arg(long, value_name = "FILE")]
        cluster_wav: Option<PathBuf>,
        /// Relative magnitude gate for cluster fitting, dB below maximum
        #[arg(long, value_name = "DB", default_value_t = 40.0)]
        vad_threshold_db: f64,
        /// Seeds the k-means restarts
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score estimates against reference sources (SDR/SIR/SAR)
    Evaluate {
        /// JSON-lines manifest: {"id", "estimates": [...], "truths": [...]}
        /// with paths relative to the manifest file
        #[arg(long, value_name = "FILE")]
        manifest: PathBuf,
        /// Directory for report.csv and summary.json
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
        /// Distortion filter length in samples
        #[arg(long, value_name = "N", default_value_t = 512)]
        filter_len: usize,
        /// Exclude this leading span from scoring, e.g. an online buffer
        #[arg(long, value_name = "MS", default_value_t = 0.0)]
        skip_buffer_ms: f64,
    },
    /// Report the output delay implied by a config or model's framing
    Latency {
        /// Model config file (key = value)
        #[arg(long, value_name = "FILE", conflicts_with = "model", required_unless_present = "model")]
        config: Option<PathBuf>,
        /// Trained model file
        #[arg(long, value_name = "FILE")]
        model: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
