//! One function per subcommand; `run` dispatches. All artifacts are written
//! to a temp file first and renamed into place, so interruption never leaves
//! a truncated file behind.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use serde_json::json;

use dcsep_core::cluster::KmeansConfig;
use dcsep_core::dsp::{istft, stft, FramingConfig, Waveform, SAMPLE_RATE};
use dcsep_core::eval::{evaluate_corpus, EvalPair};
use dcsep_core::harness::{build_dataset, load_examples};
use dcsep_core::net::{load_model, save_model};
use dcsep_core::pipeline::{
    algorithmic_latency_ms, online_init, separate_offline, SeparateOptions, SeparationResult,
};
use dcsep_core::train::{fit, TrainCorpus};
use dcsep_core::wav::{read_wav, write_wav};

use crate::config::{load_dataset_config, load_model_config};
use crate::{Command, Mode};

/// Push granularity for the streaming path: 20 ms, deliberately unaligned
/// with the frame grid to exercise it honestly. Output is chunking-invariant.
const PUSH_CHUNK: usize = 160;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Mix { config, out_dir, seed } => mix(&config, &out_dir, seed),
        Command::Train {
            train_manifest,
            val_manifest,
            config,
            out,
            log,
            curriculum,
            max_epochs,
            seed,
        } => train(
            &train_manifest,
            &val_manifest,
            &config,
            &out,
            log.as_deref(),
            curriculum,
            max_epochs,
            seed,
        ),
        Command::Separate {
            model,
            input,
            config,
            out_dir,
            mode,
            buffer_ms,
            cluster_wav,
            vad_threshold_db,
            seed,
        } => separate(
            &model,
            &input,
            config.as_deref(),
            &out_dir,
            mode,
            buffer_ms,
            cluster_wav.as_deref(),
            vad_threshold_db,
            seed,
        ),
        Command::Evaluate {
            manifest,
            out_dir,
            filter_len,
            skip_buffer_ms,
        } => evaluate(&manifest, &out_dir, filter_len, skip_buffer_ms),
        Command::Latency { config, model } => latency(config.as_deref(), model.as_deref()),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path)
        .with_context(|| format!("renaming {} into place", tmp.display()))?;
    Ok(())
}

fn mix(config: &Path, out_dir: &Path, seed: u64) -> Result<()> {
    let mut dataset = load_dataset_config(config)?;
    dataset.seed = seed;
    let paths = build_dataset(&dataset, out_dir)
        .with_context(|| format!("building dataset under {}", out_dir.display()))?;
    println!("train manifest: {}", paths.train_manifest.display());
    println!("val manifest:   {}", paths.val_manifest.display());
    println!("test manifest:  {}", paths.test_manifest.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    train_manifest: &Path,
    val_manifest: &Path,
    config: &Path,
    out: &Path,
    log: Option<&Path>,
    curriculum: bool,
    max_epochs: Option<usize>,
    seed: u64,
) -> Result<()> {
    let model_config = load_model_config(config)?;
    if curriculum && model_config.framing.window_len != 64 {
        bail!(
            "--curriculum applies only to the 8 ms window config; \
             this config uses a {} ms window",
            model_config.window_ms
        );
    }
    let mut train_config = model_config.train_config(seed, curriculum);
    if let Some(v) = max_epochs {
        train_config.max_epochs = v;
    }
    let corpus = TrainCorpus {
        train: load_examples(train_manifest)?,
        val: load_examples(val_manifest)?,
    };
    let fitted = fit(&corpus, &train_config)?;
    save_model(&fitted.params, out)?;

    let log_path = match log {
        Some(p) => p.to_path_buf(),
        None => out.with_extension("log.jsonl"),
    };
    let mut lines = String::new();
    for record in &fitted.log {
        lines.push_str(&serde_json::to_string(record)?);
        lines.push('\n');
    }
    write_atomic(&log_path, lines.as_bytes())?;

    let best_val = fitted
        .log
        .iter()
        .map(|r| r.val_loss)
        .fold(f64::INFINITY, f64::min);
    println!(
        "model: {} (best val loss {best_val:.6}, {} log records, log: {})",
        out.display(),
        fitted.log.len(),
        log_path.display()
    );
    Ok(())
}

/// Relative L2 distance between the summed estimates and the mixture's own
/// analysis-resynthesis, over the separated region. None when the whole
/// output is passthrough. The masks partition the spectrogram, so this
/// should sit at roundoff level.
fn residual_over_separated_region(
    mixture: &Waveform,
    result: &SeparationResult,
    framing: &FramingConfig,
) -> Result<Option<f64>> {
    let start = result.passthrough_samples;
    if start >= mixture.len() {
        return Ok(None);
    }
    let recon = istft(&stft(mixture, framing)?)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for n in start..mixture.len() {
        let sum: f64 = result.sources.iter().map(|s| s.samples[n]).sum();
        let d = sum - recon.samples[n];
        num += d * d;
        den += recon.samples[n] * recon.samples[n];
    }
    if den == 0.0 {
        return Ok(None);
    }
    Ok(Some((num / den).sqrt()))
}

#[allow(clippy::too_many_arguments)]
fn separate(
    model: &Path,
    input: &Path,
    config: Option<&Path>,
    out_dir: &Path,
    mode: Mode,
    buffer_ms: Option<f64>,
    cluster_wav: Option<&Path>,
    vad_threshold_db: f64,
    seed: u64,
) -> Result<()> {
    let params = load_model(model)?;
    let config_buffer_ms = match config {
        Some(path) => {
            let model_config = load_model_config(path)?;
            if model_config.framing != params.framing {
                bail!(
                    "config {} frames audio as {:?}, the model expects {:?}",
                    path.display(),
                    model_config.framing,
                    params.framing
                );
            }
            Some(model_config.buffer_ms)
        }
        None => None,
    };
    let mixture = read_wav(input)?;
    let options = SeparateOptions {
        vad_threshold_db,
        kmeans: KmeansConfig {
            seed,
            ..KmeansConfig::default()
        },
    };

    let result = match mode {
        Mode::Offline => {
            if buffer_ms.is_some() {
                bail!("--buffer-ms applies only to --mode online");
            }
            if cluster_wav.is_some() {
                bail!("--cluster-wav applies only to --mode online");
            }
            separate_offline(&params, &mixture, &options)?
        }
        Mode::Online => {
            let buffer_ms = buffer_ms.or(config_buffer_ms).unwrap_or(1500.0);
            let mut separator = online_init(&params, &options, buffer_ms)?;
            let mut primed = 0usize;
            if let Some(cluster_path) = cluster_wav {
                let cluster = read_wav(cluster_path)?;
                let need = separator.buffer_target_samples();
                if cluster.len() < need {
                    bail!(
                        "cluster wav {} has {} samples, the {buffer_ms} ms buffer needs {need}",
                        cluster_path.display(),
                        cluster.len()
                    );
                }
                for chunk in cluster.samples[..need].chunks(PUSH_CHUNK) {
                    separator.push_samples(chunk)?;
                }
                primed = need;
            }
            for chunk in mixture.samples.chunks(PUSH_CHUNK) {
                separator.push_samples(chunk)?;
            }
            let (_, mut result) = separator.flush()?;
            if primed > 0 {
                // Drop the priming span so outputs align with the input.
                for source in &mut result.sources {
                    *source = Waveform::new(source.samples[primed..].to_vec())?;
                }
                result.passthrough_samples =
                    result.passthrough_samples.saturating_sub(primed);
            }
            if !result.separated {
                eprintln!(
                    "warning: stream ended before the {buffer_ms} ms buffer filled; \
                     output is the unseparated mixture"
                );
            }
            result
        }
    };

    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let mut source_files = Vec::new();
    for (i, source) in result.sources.iter().enumerate() {
        let name = format!("source{}.wav", i + 1);
        write_wav(&out_dir.join(&name), source)?;
        source_files.push(name);
    }

    let residual = residual_over_separated_region(&mixture, &result, &params.framing)?;
    let metadata = json!({
        "mode": result.mode,
        "buffer_ms": result.buffer_ms,
        "latency_ms": result.latency_ms,
        "seed": seed,
        "separated": result.separated,
        "passthrough_samples": result.passthrough_samples,
        "buffer_quality_ratio": result.buffer_quality_ratio,
        "reconstruction_residual": residual,
        "num_sources": result.sources.len(),
        "sources": source_files,
        "input": input.display().to_string(),
        "cluster_wav": cluster_wav.map(|p| p.display().to_string()),
    });
    write_atomic(
        &out_dir.join("metadata.json"),
        format!("{}\n", serde_json::to_string_pretty(&metadata)?).as_bytes(),
    )?;
    println!(
        "{} sources -> {} (latency {} ms)",
        result.sources.len(),
        out_dir.display(),
        result.latency_ms
    );
    Ok(())
}

#[derive(Deserialize)]
struct EvalRecord {
    id: String,
    estimates: Vec<String>,
    truths: Vec<String>,
}

fn evaluate(manifest: &Path, out_dir: &Path, filter_len: usize, skip_buffer_ms: f64) -> Result<()> {
    if !(skip_buffer_ms.is_finite() && skip_buffer_ms >= 0.0) {
        bail!("--skip-buffer-ms must be non-negative");
    }
    let skip_samples = (skip_buffer_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize;
    let text = fs::read_to_string(manifest)
        .with_context(|| format!("reading manifest {}", manifest.display()))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: EvalRecord = serde_json::from_str(line)
            .with_context(|| format!("{}:{}: bad record", manifest.display(), i + 1))?;
        let load = |rels: &[String]| -> Result<Vec<Waveform>> {
            rels.iter().map(|rel| Ok(read_wav(&base.join(rel))?)).collect()
        };
        pairs.push(EvalPair {
            estimates: load(&record.estimates)
                .with_context(|| format!("mixture {}: loading estimates", record.id))?,
            truths: load(&record.truths)
                .with_context(|| format!("mixture {}: loading truths", record.id))?,
            id: record.id,
            skip_samples,
        });
    }
    let report = evaluate_corpus(&pairs, filter_len)?;
    let summary = report.summary();

    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    write_atomic(&out_dir.join("report.csv"), report.to_csv().as_bytes())?;
    let summary_json = serde_json::to_string_pretty(&summary)?;
    write_atomic(
        &out_dir.join("summary.json"),
        format!("{summary_json}\n").as_bytes(),
    )?;
    println!("{summary_json}");
    Ok(())
}

fn latency(config: Option<&Path>, model: Option<&Path>) -> Result<()> {
    let framing = match (config, model) {
        (Some(path), None) => load_model_config(path)?.framing,
        (None, Some(path)) => load_model(path)?.framing,
        _ => unreachable!("clap enforces exactly one source"),
    };
    let report = json!({
        "window_len": framing.window_len,
        "hop_len": framing.hop_len,
        "algorithmic_latency_ms": algorithmic_latency_ms(&framing),
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
