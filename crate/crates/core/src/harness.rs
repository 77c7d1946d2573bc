//! Corpus construction: synthetic two-class utterances, silence trimming,
//! mixing at a chosen level, and manifest-driven dataset generation.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::train::TrainExample;
use crate::wav::{read_wav, write_wav};

pub const TRIM_FRAME_MS: f64 = 10.0;
pub const TRIM_THRESHOLD_DB: f64 = 40.0;

/// Two disjoint voice classes: A sits low with falling harmonics, B sits
/// higher with its energy pushed toward 1-2 kHz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UtteranceClass {
    A,
    B,
}

/// Harmonic burst-pause utterance. Bursts and pauses alternate with smooth
/// 10 ms edges, the signal starts voiced, and no pause exceeds 200 ms.
pub fn synth_utterance(class: UtteranceClass, duration_s: f64, seed: u64) -> Result<Waveform> {
    if !(duration_s >= 0.5) || !duration_s.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "utterance duration {duration_s} below the 0.5 s minimum"
        )));
    }
    let rate = crate::dsp::SAMPLE_RATE as f64;
    let n = (duration_s * rate).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let f0: f64 = match class {
        UtteranceClass::A => rng.gen_range(90.0..140.0),
        UtteranceClass::B => rng.gen_range(220.0..330.0),
    };
    let vib_rate = rng.gen_range(2.0..5.0);
    let vib_phase = rng.gen_range(0.0..TAU);
    let kmax = (3900.0 / f0).floor() as usize;
    let mut amps = Vec::with_capacity(kmax);
    let mut theta = Vec::with_capacity(kmax);
    for k in 1..=kmax {
        let fk = k as f64 * f0;
        let a = match class {
            UtteranceClass::A => 1.0 / (1.0 + (fk / 300.0).powi(2)),
            UtteranceClass::B => {
                0.12 / (1.0 + (fk / 600.0).powi(2)) + (-((fk - 1500.0) / 400.0).powi(2)).exp()
            }
        };
        amps.push(a);
        theta.push(rng.gen_range(0.0..TAU));
    }

    // Voiced/pause gate; pauses are exact zeros between half-cosine ramps.
    let mut env = vec![0.0; n];
    let ramp = (0.010 * rate).round() as usize;
    let mut pos = 0;
    let mut voiced = true;
    while pos < n {
        let seg_s = if voiced {
            rng.gen_range(0.25..0.60)
        } else {
            rng.gen_range(0.03..0.20)
        };
        let end = (pos + ((seg_s * rate).round() as usize).max(1)).min(n);
        if voiced {
            let r = ramp.min((end - pos) / 2).max(1);
            for i in pos..end {
                let up = (i - pos).min(end - 1 - i);
                env[i] = if up < r {
                    0.5 * (1.0 - (PI * (up as f64 + 0.5) / r as f64).cos())
                } else {
                    1.0
                };
            }
        }
        pos = end;
        voiced = !voiced;
    }

    let mut x = vec![0.0; n];
    let mut peak = 0.0_f64;
    for i in 0..n {
        let t = i as f64 / rate;
        let fi = f0 * (1.0 + 0.02 * (vib_rate * TAU * t + vib_phase).sin());
        if env[i] > 0.0 {
            let mut s = 0.0;
            for (k, a) in amps.iter().enumerate() {
                s += a * theta[k].sin();
            }
            x[i] = s * env[i];
            peak = peak.max(x[i].abs());
        }
        for (k, th) in theta.iter_mut().enumerate() {
            *th += TAU * (k + 1) as f64 * fi / rate;
        }
    }
    let g = 0.5 / peak;
    for v in &mut x {
        *v *= g;
    }
    Waveform::new(x)
}

/// Drops leading frames whose RMS falls more than `threshold_db` below the
/// loudest frame; the first retained frame is active by construction.
pub fn trim_leading_silence(x: &Waveform, frame_ms: f64, threshold_db: f64) -> Result<Waveform> {
    if !(frame_ms > 0.0) || !frame_ms.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "trim frame length {frame_ms} ms must be positive"
        )));
    }
    if !(threshold_db > 0.0) || !threshold_db.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "trim threshold {threshold_db} dB must be positive"
        )));
    }
    let frame = ((frame_ms * x.sample_rate as f64 / 1000.0).round() as usize).max(1);
    let rms: Vec<f64> = x
        .samples
        .chunks(frame)
        .map(|c| (c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64).sqrt())
        .collect();
    let max_rms = rms.iter().fold(0.0_f64, |m, &v| m.max(v));
    if max_rms == 0.0 {
        return Err(Error::Data("cannot trim an all-silent signal".into()));
    }
    let gate = max_rms * 10.0_f64.powf(-threshold_db / 20.0);
    let first = rms
        .iter()
        .position(|&v| v > gate)
        .expect("loudest frame passes its own gate");
    Waveform::new(x.samples[first * frame..].to_vec())
}

#[derive(Debug, Clone)]
pub struct MixedPair {
    pub mixture: Waveform,
    pub sources: [Waveform; 2],
}

/// Truncates to the shorter signal, levels the pair so source 1 sits
/// `snr_db` above source 2, and sums. If the sum would clip, all three
/// signals are scaled by one shared factor, so the mixture stays the exact
/// sample-wise sum of the returned sources.
pub fn make_mixture(s1: &Waveform, s2: &Waveform, snr_db: f64) -> Result<MixedPair> {
    if !snr_db.is_finite() {
        return Err(Error::InvalidConfig("mixing SNR must be finite".into()));
    }
    let n = s1.samples.len().min(s2.samples.len());
    let a = &s1.samples[..n];
    let b = &s2.samples[..n];
    let rms = |x: &[f64]| (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    let (r1, r2) = (rms(a), rms(b));
    if r1 == 0.0 || r2 == 0.0 {
        return Err(Error::Data(
            "a mixture source is silent over the shared length".into(),
        ));
    }
    const TARGET_RMS: f64 = 0.05;
    let mut g1 = TARGET_RMS / r1;
    let mut g2 = TARGET_RMS * 10.0_f64.powf(-snr_db / 20.0) / r2;
    let peak = a
        .iter()
        .zip(b)
        .map(|(x, y)| (g1 * x + g2 * y).abs())
        .fold(0.0_f64, f64::max);
    if peak > 1.0 {
        let f = 0.999 / peak;
        g1 *= f;
        g2 *= f;
    }
    let x1: Vec<f64> = a.iter().map(|v| g1 * v).collect();
    let x2: Vec<f64> = b.iter().map(|v| g2 * v).collect();
    let mix: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| p + q).collect();
    Ok(MixedPair {
        mixture: Waveform::new(mix)?,
        sources: [Waveform::new(x1)?, Waveform::new(x2)?],
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    pub speakers_per_class_train: usize,
    pub speakers_per_class_test: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_train: 400,
            num_val: 50,
            num_test: 60,
            speakers_per_class_train: 6,
            speakers_per_class_test: 3,
            min_duration_s: 3.0,
            max_duration_s: 6.0,
            snr_db: 0.0,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_train == 0 || self.num_val == 0 || self.num_test == 0 {
            return Err(Error::InvalidConfig(
                "every dataset split needs at least one mixture".into(),
            ));
        }
        if self.speakers_per_class_train == 0 || self.speakers_per_class_test == 0 {
            return Err(Error::InvalidConfig(
                "need at least one speaker per class on each side".into(),
            ));
        }
        if !(self.min_duration_s >= 0.5)
            || !(self.max_duration_s >= self.min_duration_s)
            || !self.max_duration_s.is_finite()
        {
            return Err(Error::InvalidConfig(format!(
                "bad duration range {}..{} s",
                self.min_duration_s, self.max_duration_s
            )));
        }
        if !self.snr_db.is_finite() {
            return Err(Error::InvalidConfig("mixing SNR must be finite".into()));
        }
        Ok(())
    }
}

/// One manifest line. Paths are relative to the manifest's directory.
/// Test records carry a second mixture of the same speaker pair for cluster
/// centre estimation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MixtureRecord {
    pub id: String,
    pub mixture: String,
    pub source1: String,
    pub source2: String,
    pub speaker1: String,
    pub speaker2: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_mixture: Option<String>,
}

#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub train_manifest: PathBuf,
    pub val_manifest: PathBuf,
    pub test_manifest: PathBuf,
}

fn subseed(base: u64, salt: u64, index: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(salt)
        .wrapping_mul(0xBF58_476D_1CE4_E5B9)
        .wrapping_add(index)
}

fn prepared_utterance(class: UtteranceClass, duration_s: f64, seed: u64) -> Result<Waveform> {
    let raw = synth_utterance(class, duration_s, seed)?;
    trim_leading_silence(&raw, TRIM_FRAME_MS, TRIM_THRESHOLD_DB)
}

/// Synthesizes and writes one split. Speaker pools are per side, so test
/// speakers never appear in train or val.
struct SplitBuilder<'a> {
    config: &'a DatasetConfig,
    out_dir: &'a Path,
    split: &'a str,
    split_salt: u64,
    speaker_side: &'a str,
    speakers_per_class: usize,
    with_cluster: bool,
}

impl SplitBuilder<'_> {
    fn build(&self, count: usize) -> Result<Vec<MixtureRecord>> {
        let dir = self.out_dir.join(self.split);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut records = Vec::with_capacity(count);
        for i in 0..count {
            let record_seed = subseed(self.config.seed, self.split_salt, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(record_seed);
            let spk_a = rng.gen_range(0..self.speakers_per_class);
            let spk_b = rng.gen_range(0..self.speakers_per_class);
            let dur = |rng: &mut ChaCha8Rng| {
                rng.gen_range(self.config.min_duration_s..=self.config.max_duration_s)
            };
            let (d1, d2) = (dur(&mut rng), dur(&mut rng));
            let (u1, u2) = (rng.gen::<u64>(), rng.gen::<u64>());
            let ua = prepared_utterance(UtteranceClass::A, d1, u1)?;
            let ub = prepared_utterance(UtteranceClass::B, d2, u2)?;
            let pair = make_mixture(&ua, &ub, self.config.snr_db)?;

            let id = format!("{}{i:03}", self.split);
            let rel = |suffix: &str| format!("{}/{id}_{suffix}.wav", self.split);
            write_wav(&self.out_dir.join(rel("mix")), &pair.mixture)?;
            write_wav(&self.out_dir.join(rel("s1")), &pair.sources[0])?;
            write_wav(&self.out_dir.join(rel("s2")), &pair.sources[1])?;

            let cluster_mixture = if self.with_cluster {
                let (d3, d4) = (dur(&mut rng), dur(&mut rng));
                let (u3, u4) = (rng.gen::<u64>(), rng.gen::<u64>());
                let ca = prepared_utterance(UtteranceClass::A, d3, u3)?;
                let cb = prepared_utterance(UtteranceClass::B, d4, u4)?;
                let cpair = make_mixture(&ca, &cb, self.config.snr_db)?;
                write_wav(&self.out_dir.join(rel("cluster")), &cpair.mixture)?;
                Some(rel("cluster"))
            } else {
                None
            };

            records.push(MixtureRecord {
                id: id.clone(),
                mixture: rel("mix"),
                source1: rel("s1"),
                source2: rel("s2"),
                speaker1: format!("{}A{spk_a}", self.speaker_side),
                speaker2: format!("{}B{spk_b}", self.speaker_side),
                seed: record_seed,
                cluster_mixture,
            });
        }
        Ok(records)
    }
}

fn write_manifest(path: &Path, records: &[MixtureRecord]) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        for r in records {
            let line = serde_json::to_string(r)
                .map_err(|e| Error::Data(format!("manifest record {}: {e}", r.id)))?;
            writeln!(f, "{line}").map_err(|e| Error::io(&tmp, e))?;
        }
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Generates train/val/test mixtures plus JSONL manifests under `out_dir`.
/// Everything is a pure function of the config, so reruns are bit-identical.
pub fn build_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<DatasetPaths> {
    config.validate()?;
    let splits = [
        ("train", 1, "tr", config.speakers_per_class_train, false, config.num_train),
        ("val", 2, "tr", config.speakers_per_class_train, false, config.num_val),
        ("test", 3, "te", config.speakers_per_class_test, true, config.num_test),
    ];
    let mut manifests = Vec::with_capacity(3);
    for (split, salt, side, speakers, with_cluster, count) in splits {
        let builder = SplitBuilder {
            config,
            out_dir,
            split,
            split_salt: salt,
            speaker_side: side,
            speakers_per_class: speakers,
            with_cluster,
        };
        let records = builder.build(count)?;
        let path = out_dir.join(format!("{split}.jsonl"));
        write_manifest(&path, &records)?;
        manifests.push(path);
    }
    let mut it = manifests.into_iter();
    Ok(DatasetPaths {
        train_manifest: it.next().unwrap(),
        val_manifest: it.next().unwrap(),
        test_manifest: it.next().unwrap(),
    })
}

pub fn load_manifest(path: &Path) -> Result<Vec<MixtureRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: MixtureRecord = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if r.speaker1 == r.speaker2 {
            return Err(Error::Data(format!(
                "{}: mixture {} repeats speaker {}",
                path.display(),
                r.id,
                r.speaker1
            )));
        }
        if r.cluster_mixture.as_deref() == Some(r.mixture.as_str()) {
            return Err(Error::Data(format!(
                "{}: mixture {} uses itself as its cluster utterance",
                path.display(),
                r.id
            )));
        }
        records.push(r);
    }
    if records.is_empty() {
        return Err(Error::Data(format!(
            "{}: manifest has no records",
            path.display()
        )));
    }
    Ok(records)
}

/// Joins a manifest-relative path against the manifest's directory.
pub fn resolve_path(manifest: &Path, rel: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(rel)
}

pub fn load_examples(manifest: &Path) -> Result<Vec<TrainExample>> {
    let records = load_manifest(manifest)?;
    records
        .iter()
        .map(|r| {
            Ok(TrainExample {
                mixture: read_wav(&resolve_path(manifest, &r.mixture))?,
                sources: [
                    read_wav(&resolve_path(manifest, &r.source1))?,
                    read_wav(&resolve_path(manifest, &r.source2))?,
                ],
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{stft, FramingConfig, SAMPLE_RATE};
    use crate::eval::resolve_permutation;

    fn tone(n: usize, amp: f64) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (TAU * 500.0 * i as f64 / SAMPLE_RATE as f64).sin())
            .collect()
    }

    #[test]
    fn trim_removes_exactly_the_leading_zeros() {
        let mut x = vec![0.0; 4000];
        x.extend(tone(4000, 0.3));
        let w = Waveform::new(x.clone()).unwrap();
        let t = trim_leading_silence(&w, TRIM_FRAME_MS, TRIM_THRESHOLD_DB).unwrap();
        assert_eq!(t.samples.len(), 4000);
        assert_eq!(t.samples, x[4000..]);
    }

    #[test]
    fn trim_keeps_a_signal_that_starts_active() {
        let w = Waveform::new(tone(2000, 0.3)).unwrap();
        let t = trim_leading_silence(&w, TRIM_FRAME_MS, TRIM_THRESHOLD_DB).unwrap();
        assert_eq!(t.samples, w.samples);
    }

    #[test]
    fn trim_drops_quiet_frames_and_retains_an_active_first_frame() {
        // Prefix sits 50 dB down, below the 40 dB gate.
        let mut x = tone(1600, 0.3 * 10.0_f64.powf(-50.0 / 20.0));
        x.extend(tone(3200, 0.3));
        let w = Waveform::new(x).unwrap();
        let t = trim_leading_silence(&w, TRIM_FRAME_MS, TRIM_THRESHOLD_DB).unwrap();
        assert_eq!(t.samples.len(), 3200);
        let frame = 80;
        let first_rms =
            (t.samples[..frame].iter().map(|v| v * v).sum::<f64>() / frame as f64).sqrt();
        let all_rms: Vec<f64> = t
            .samples
            .chunks(frame)
            .map(|c| (c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64).sqrt())
            .collect();
        let max = all_rms.iter().fold(0.0_f64, |m, &v| m.max(v));
        assert!(first_rms > max * 10.0_f64.powf(-TRIM_THRESHOLD_DB / 20.0));
    }

    #[test]
    fn trim_rejects_silence_and_bad_params() {
        let silent = Waveform::new(vec![0.0; 100]).unwrap();
        assert!(matches!(
            trim_leading_silence(&silent, 10.0, 40.0),
            Err(Error::Data(_))
        ));
        let w = Waveform::new(tone(100, 0.1)).unwrap();
        assert!(trim_leading_silence(&w, 0.0, 40.0).is_err());
        assert!(trim_leading_silence(&w, 10.0, -3.0).is_err());
    }

    fn noise(seed: u64, n: usize) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()).unwrap()
    }

    #[test]
    fn mixture_levels_lengths_and_additivity() {
        let s1 = noise(1, 1300);
        let s2 = noise(2, 1000);
        let pair = make_mixture(&s1, &s2, 0.0).unwrap();
        assert_eq!(pair.mixture.samples.len(), 1000);
        let rms = |w: &Waveform| {
            (w.samples.iter().map(|v| v * v).sum::<f64>() / w.samples.len() as f64).sqrt()
        };
        let (r1, r2) = (rms(&pair.sources[0]), rms(&pair.sources[1]));
        assert!((r1 / r2 - 1.0).abs() < 1e-12);
        for i in 0..1000 {
            assert_eq!(
                pair.mixture.samples[i],
                pair.sources[0].samples[i] + pair.sources[1].samples[i]
            );
        }
        let loud = make_mixture(&s1, &s2, 6.0).unwrap();
        let gap = 20.0 * (rms(&loud.sources[0]) / rms(&loud.sources[1])).log10();
        assert!((gap - 6.0).abs() < 1e-9);
    }

    #[test]
    fn clipping_mixture_is_rescaled_jointly() {
        // Sparse spikes: tiny RMS, huge peak after leveling.
        let spiky = |seed: u64| {
            let mut x = vec![0.001; 6400];
            x[10 + seed as usize] = 1.0;
            Waveform::new(x).unwrap()
        };
        let s1 = spiky(0);
        let s2 = spiky(0);
        let pair = make_mixture(&s1, &s2, 0.0).unwrap();
        let peak = pair
            .mixture
            .samples
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(peak <= 1.0 && peak > 0.9);
        // Per-source waveform shape is preserved under the shared factor.
        let ratio = pair.sources[0].samples[10] / pair.sources[0].samples[20];
        assert!((ratio - 1000.0).abs() < 1e-6);
        for i in 0..6400 {
            assert_eq!(
                pair.mixture.samples[i],
                pair.sources[0].samples[i] + pair.sources[1].samples[i]
            );
        }
    }

    #[test]
    fn mixture_rejects_a_silent_source() {
        let s1 = noise(3, 500);
        let z = Waveform::new(vec![0.0; 500]).unwrap();
        assert!(matches!(make_mixture(&s1, &z, 0.0), Err(Error::Data(_))));
        assert!(make_mixture(&s1, &noise(4, 500), f64::NAN).is_err());
    }

    #[test]
    fn unseparated_mixture_scores_near_zero_db() {
        let s1 = noise(5, 8000);
        let s2 = noise(6, 8000);
        let pair = make_mixture(&s1, &s2, 0.0).unwrap();
        let m = resolve_permutation(
            &[pair.mixture.clone(), pair.mixture.clone()],
            &pair.sources,
            1,
        )
        .unwrap();
        let mean = (m.sdr_db[0] + m.sdr_db[1]) / 2.0;
        assert!(mean.abs() < 1.0, "unseparated mean SDR {mean}");
    }

    #[test]
    fn utterances_are_deterministic_and_sized_to_the_sample() {
        let a = synth_utterance(UtteranceClass::A, 0.73, 9).unwrap();
        let b = synth_utterance(UtteranceClass::A, 0.73, 9).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.samples.len(), 5840);
        assert_eq!(
            synth_utterance(UtteranceClass::B, 0.5, 1).unwrap().samples.len(),
            4000
        );
        assert!(synth_utterance(UtteranceClass::A, 0.49, 1).is_err());
        let peak = a.samples.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        assert!(peak <= 1.0);
        assert!(
            synth_utterance(UtteranceClass::A, 0.73, 10).unwrap().samples != a.samples,
            "different seeds must differ"
        );
    }

    fn centroid_hz(w: &Waveform) -> f64 {
        let framing = FramingConfig::new(256, 64, 256).unwrap();
        let spec = stft(w, &framing).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for t in 0..spec.num_frames() {
            for f in 0..framing.num_bins() {
                let mag = spec.bins[(t, f)].norm();
                num += f as f64 * SAMPLE_RATE as f64 / 256.0 * mag;
                den += mag;
            }
        }
        num / den
    }

    #[test]
    fn class_a_sits_below_class_b_in_spectral_centroid() {
        for seed in 0..100 {
            let a = synth_utterance(UtteranceClass::A, 0.6, seed).unwrap();
            let b = synth_utterance(UtteranceClass::B, 0.6, seed).unwrap();
            let (ca, cb) = (centroid_hz(&a), centroid_hz(&b));
            assert!(ca < cb, "seed {seed}: centroid A {ca:.0} Hz vs B {cb:.0} Hz");
        }
    }

    #[test]
    fn pauses_are_bounded_and_the_start_is_voiced() {
        for seed in 0..10 {
            let w = synth_utterance(UtteranceClass::B, 2.0, seed).unwrap();
            let head: f64 = w.samples[..800].iter().map(|v| v * v).sum();
            assert!(head > 0.0, "seed {seed} starts silent");
            let mut run = 0usize;
            let mut longest = 0usize;
            for &v in &w.samples {
                if v == 0.0 {
                    run += 1;
                    longest = longest.max(run);
                } else {
                    run = 0;
                }
            }
            assert!(longest <= 1600, "seed {seed}: {longest}-sample pause");
        }
    }

    fn small_config() -> DatasetConfig {
        DatasetConfig {
            num_train: 3,
            num_val: 2,
            num_test: 2,
            speakers_per_class_train: 2,
            speakers_per_class_test: 2,
            min_duration_s: 0.6,
            max_duration_s: 0.9,
            snr_db: 0.0,
            seed: 42,
        }
    }

    #[test]
    fn dataset_builds_loads_and_keeps_speaker_sides_apart() {
        let dir = tempfile::tempdir().unwrap();
        let paths = build_dataset(&small_config(), dir.path()).unwrap();
        let train = load_manifest(&paths.train_manifest).unwrap();
        let val = load_manifest(&paths.val_manifest).unwrap();
        let test = load_manifest(&paths.test_manifest).unwrap();
        assert_eq!((train.len(), val.len(), test.len()), (3, 2, 2));

        let side: Vec<&str> = train
            .iter()
            .chain(&val)
            .flat_map(|r| [r.speaker1.as_str(), r.speaker2.as_str()])
            .collect();
        assert!(side.iter().all(|s| s.starts_with("tr")));
        for r in &test {
            assert!(r.speaker1.starts_with("te") && r.speaker2.starts_with("te"));
            assert_ne!(r.speaker1, r.speaker2);
            let cluster = r.cluster_mixture.as_ref().expect("test record has cluster");
            assert_ne!(cluster, &r.mixture);
            let cw = read_wav(&resolve_path(&paths.test_manifest, cluster)).unwrap();
            assert!(!cw.samples.is_empty());
        }

        for (manifest, records) in [
            (&paths.train_manifest, &train),
            (&paths.test_manifest, &test),
        ] {
            for r in records.iter() {
                let mix = read_wav(&resolve_path(manifest, &r.mixture)).unwrap();
                let s1 = read_wav(&resolve_path(manifest, &r.source1)).unwrap();
                let s2 = read_wav(&resolve_path(manifest, &r.source2)).unwrap();
                assert_eq!(mix.samples.len(), s1.samples.len());
                assert_eq!(mix.samples.len(), s2.samples.len());
                // Quantization allows 1.5 LSB of disagreement per sample.
                for i in 0..mix.samples.len() {
                    let diff = (mix.samples[i] - s1.samples[i] - s2.samples[i]).abs();
                    assert!(diff <= 2.5 / 32768.0, "{} sample {i}", r.id);
                }
                // Both sources carry energy within the first 100 ms.
                let head = |w: &Waveform| w.samples[..800].iter().map(|v| v * v).sum::<f64>();
                assert!(head(&s1) > 0.0 && head(&s2) > 0.0);
            }
        }

        let examples = load_examples(&paths.train_manifest).unwrap();
        assert_eq!(examples.len(), 3);
        assert_eq!(
            examples[0].mixture.samples.len(),
            examples[0].sources[0].samples.len()
        );
    }

    #[test]
    fn dataset_generation_is_bit_reproducible() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let p1 = build_dataset(&small_config(), d1.path()).unwrap();
        let p2 = build_dataset(&small_config(), d2.path()).unwrap();
        assert_eq!(
            fs::read(&p1.train_manifest).unwrap(),
            fs::read(&p2.train_manifest).unwrap()
        );
        assert_eq!(
            fs::read(&p1.test_manifest).unwrap(),
            fs::read(&p2.test_manifest).unwrap()
        );
        for r in load_manifest(&p1.test_manifest).unwrap() {
            let a = fs::read(resolve_path(&p1.test_manifest, &r.mixture)).unwrap();
            let b = fs::read(resolve_path(&p2.test_manifest, &r.mixture)).unwrap();
            assert_eq!(a, b, "{}", r.id);
        }
    }

    #[test]
    fn manifest_validation_rejects_corrupt_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "not json\n").unwrap();
        assert!(load_manifest(&path).is_err());
        let rec = r#"{"id":"x","mixture":"m.wav","source1":"a.wav","source2":"b.wav","speaker1":"s","speaker2":"s","seed":1}"#;
        fs::write(&path, format!("{rec}\n")).unwrap();
        assert!(load_manifest(&path).is_err());
        fs::write(&path, "").unwrap();
        assert!(load_manifest(&path).is_err());
        assert!(load_manifest(&dir.path().join("missing.jsonl")).is_err());
    }
}
