//! Key-value config files: `key = value` lines, `#` comments, no sections.
//! Durations are in milliseconds and must land on whole samples at 8 kHz.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use dcsep_core::dsp::{FramingConfig, SAMPLE_RATE};
use dcsep_core::harness::DatasetConfig;
use dcsep_core::train::TrainConfig;

pub struct KeyValueFile {
    path: PathBuf,
    values: BTreeMap<String, String>,
}

impl KeyValueFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("{}:{}: expected `key = value`, got `{raw}`", path.display(), i + 1);
            };
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() || value.is_empty() {
                bail!("{}:{}: empty key or value in `{raw}`", path.display(), i + 1);
            }
            if values.insert(key.to_string(), value.to_string()).is_some() {
                bail!("{}:{}: duplicate key `{key}`", path.display(), i + 1);
            }
        }
        Ok(KeyValueFile {
            path: path.to_path_buf(),
            values,
        })
    }

    pub fn take<T>(&mut self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: Display,
    {
        match self.values.remove(key) {
            None => Ok(None),
            Some(raw) => raw.parse::<T>().map(Some).map_err(|e| {
                anyhow::anyhow!("{}: key `{key}` = `{raw}`: {e}", self.path.display())
            }),
        }
    }

    pub fn require<T>(&mut self, key: &str) -> Result<T>
    where
        T: FromStr,
        T::Err: Display,
    {
        self.take(key)?
            .with_context(|| format!("{}: missing key `{key}`", self.path.display()))
    }

    /// Rejects leftover keys so typos fail loudly instead of silently
    /// falling back to defaults.
    pub fn finish(self) -> Result<()> {
        if self.values.is_empty() {
            return Ok(());
        }
        let keys: Vec<&str> = self.values.keys().map(String::as_str).collect();
        bail!("{}: unknown keys: {}", self.path.display(), keys.join(", "));
    }
}

fn ms_to_samples(ms: f64, key: &str) -> Result<usize> {
    let samples = ms * SAMPLE_RATE as f64 / 1000.0;
    if !(samples.is_finite() && samples > 0.0 && samples.fract() == 0.0) {
        bail!("{key} = {ms} ms is not a positive whole number of samples at {SAMPLE_RATE} Hz");
    }
    Ok(samples as usize)
}

pub struct ModelConfig {
    pub window_ms: f64,
    pub framing: FramingConfig,
    pub layers: usize,
    pub units: usize,
    pub embed_dim: usize,
    pub bidirectional: bool,
    pub seq_len: usize,
    pub buffer_ms: f64,
    pub max_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub patience: Option<usize>,
    pub vad_threshold_db: Option<f64>,
}

pub fn load_model_config(path: &Path) -> Result<ModelConfig> {
    let mut kv = KeyValueFile::load(path)?;
    let window_ms: f64 = kv.require("window_ms")?;
    let hop_ms: f64 = kv.require("hop_ms")?;
    let fft_size: usize = kv.require("fft_size")?;
    let config = ModelConfig {
        window_ms,
        framing: FramingConfig::new(
            ms_to_samples(window_ms, "window_ms")?,
            ms_to_samples(hop_ms, "hop_ms")?,
            fft_size,
        )?,
        layers: kv.require("layers")?,
        units: kv.require("units")?,
        embed_dim: kv.require("embed_dim")?,
        bidirectional: kv.take("bidirectional")?.unwrap_or(false),
        seq_len: kv.take("seq_len")?.unwrap_or(100),
        buffer_ms: kv.take("buffer_ms")?.unwrap_or(1500.0),
        max_epochs: kv.take("max_epochs")?,
        batch_size: kv.take("batch_size")?,
        learning_rate: kv.take("learning_rate")?,
        patience: kv.take("patience")?,
        vad_threshold_db: kv.take("vad_threshold_db")?,
    };
    kv.finish()?;
    Ok(config)
}

impl ModelConfig {
    /// Training setup from this config. Stage 2 of the curriculum doubles
    /// the sequence length.
    pub fn train_config(&self, seed: u64, curriculum: bool) -> TrainConfig {
        let mut tc = TrainConfig::new(self.framing);
        tc.embed_dim = self.embed_dim;
        tc.num_layers = self.layers;
        tc.units = self.units;
        tc.bidirectional = self.bidirectional;
        tc.seq_len_stage1 = self.seq_len;
        tc.seq_len_stage2 = self.seq_len * 2;
        tc.curriculum = curriculum;
        tc.seed = seed;
        if let Some(v) = self.max_epochs {
            tc.max_epochs = v;
        }
        if let Some(v) = self.batch_size {
            tc.batch_size = v;
        }
        if let Some(v) = self.learning_rate {
            tc.learning_rate = v;
        }
        if let Some(v) = self.patience {
            tc.patience_epochs = v;
        }
        if let Some(v) = self.vad_threshold_db {
            tc.vad_threshold_db = v;
        }
        tc
    }
}

/// Dataset config; every key is optional and falls back to the desk-scale
/// defaults. The seed comes from the command line, not the file.
pub fn load_dataset_config(path: &Path) -> Result<DatasetConfig> {
    let mut kv = KeyValueFile::load(path)?;
    let defaults = DatasetConfig::default();
    let config = DatasetConfig {
        num_train: kv.take("num_train")?.unwrap_or(defaults.num_train),
        num_val: kv.take("num_val")?.unwrap_or(defaults.num_val),
        num_test: kv.take("num_test")?.unwrap_or(defaults.num_test),
        speakers_per_class_train: kv
            .take("speakers_per_class_train")?
            .unwrap_or(defaults.speakers_per_class_train),
        speakers_per_class_test: kv
            .take("speakers_per_class_test")?
            .unwrap_or(defaults.speakers_per_class_test),
        min_duration_s: kv.take("min_duration_s")?.unwrap_or(defaults.min_duration_s),
        max_duration_s: kv.take("max_duration_s")?.unwrap_or(defaults.max_duration_s),
        snr_db: kv.take("snr_db")?.unwrap_or(defaults.snr_db),
        seed: defaults.seed,
    };
    kv.finish()?;
    Ok(config)
}
