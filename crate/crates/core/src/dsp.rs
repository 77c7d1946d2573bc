//! STFT analysis/synthesis, log-magnitude features, activity masks and
//! time-frequency mask application.

use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// All audio in this crate is mono at this rate.
pub const SAMPLE_RATE: u32 = 8000;

/// Floor added to magnitudes before taking the log.
pub const LOG_FLOOR: f64 = 1e-8;

/// Mono waveform, samples in [-1, 1] by convention (not enforced).
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("empty waveform".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Data(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate: SAMPLE_RATE,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Frame geometry shared by analysis and synthesis.
///
/// Invariants enforced at construction: `hop_len` divides `window_len`,
/// `fft_size` is even and at least `window_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FramingConfig {
    pub window_len: usize,
    pub hop_len: usize,
    pub fft_size: usize,
}

impl FramingConfig {
    pub fn new(window_len: usize, hop_len: usize, fft_size: usize) -> Result<Self> {
        if window_len < 2 {
            return Err(Error::InvalidConfig(format!(
                "window_len {window_len} must be at least 2"
            )));
        }
        if hop_len == 0 || hop_len > window_len {
            return Err(Error::InvalidConfig(format!(
                "hop_len {hop_len} must be in 1..={window_len}"
            )));
        }
        if window_len % hop_len != 0 {
            return Err(Error::InvalidConfig(format!(
                "hop_len {hop_len} must divide window_len {window_len}"
            )));
        }
        if fft_size < window_len || fft_size % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "fft_size {fft_size} must be even and at least window_len {window_len}"
            )));
        }
        Ok(Self {
            window_len,
            hop_len,
            fft_size,
        })
    }

    /// Build from window/hop durations in milliseconds at [`SAMPLE_RATE`].
    pub fn from_ms(window_ms: f64, hop_ms: f64, fft_size: usize) -> Result<Self> {
        let to_samples = |ms: f64, name: &str| -> Result<usize> {
            let s = ms * SAMPLE_RATE as f64 / 1000.0;
            if !(s.is_finite() && s > 0.0 && s.fract() == 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} {ms} ms is not a whole number of samples at {SAMPLE_RATE} Hz"
                )));
            }
            Ok(s as usize)
        };
        Self::new(
            to_samples(window_ms, "window_ms")?,
            to_samples(hop_ms, "hop_ms")?,
            fft_size,
        )
    }

    /// One-sided spectrum size.
    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frames covering `num_samples`, tail zero-padded. Short input still
    /// produces one frame.
    pub fn num_frames(&self, num_samples: usize) -> usize {
        if num_samples <= self.window_len {
            1
        } else {
            (num_samples - self.window_len).div_ceil(self.hop_len) + 1
        }
    }
}

/// Periodic Hann window of length `config.window_len`.
pub fn make_window(config: &FramingConfig) -> Vec<f64> {
    let n = config.window_len;
    (0..n)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
        .collect()
}

/// Overlap-added window sum, checked for constancy over interior positions.
///
/// Returns the constant on success. The periodic Hann window sums to a
/// constant whenever `hop_len` divides `window_len`.
pub fn overlap_add_constant(config: &FramingConfig) -> Result<f64> {
    let w = make_window(config);
    let frames = 8;
    let len = (frames - 1) * config.hop_len + config.window_len;
    let mut acc = vec![0.0f64; len];
    for t in 0..frames {
        for (j, &wj) in w.iter().enumerate() {
            acc[t * config.hop_len + j] += wj;
        }
    }
    let interior = &acc[config.window_len..len - config.window_len];
    let c = interior[0];
    for (i, &v) in interior.iter().enumerate() {
        if (v - c).abs() > 1e-9 * c.max(1.0) {
            return Err(Error::Numeric {
                tensor: "window".into(),
                detail: format!(
                    "overlap-add sum varies at interior position {i}: {v} vs {c}"
                ),
            });
        }
    }
    Ok(c)
}

/// One-sided complex STFT, `bins` is frames x bins.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    pub bins: Array2<Complex64>,
    pub config: FramingConfig,
    /// Length of the waveform this spectrogram was computed from; [`istft`]
    /// truncates its output to this.
    pub num_samples: usize,
}

impl ComplexSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.bins.nrows()
    }

    pub fn num_bins(&self) -> usize {
        self.bins.ncols()
    }
}

/// Per-frame transform pair shared by the batch STFT/ISTFT and the
/// streaming path, so both produce bit-identical frames.
pub(crate) struct FrameCodec {
    config: FramingConfig,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl FrameCodec {
    pub(crate) fn new(config: &FramingConfig) -> Self {
        let mut planner = FftPlanner::new();
        FrameCodec {
            config: *config,
            window: make_window(config),
            fft: planner.plan_fft_forward(config.fft_size),
            ifft: planner.plan_fft_inverse(config.fft_size),
        }
    }

    pub(crate) fn window(&self) -> &[f64] {
        &self.window
    }

    /// One-sided spectrum of one windowed frame (`frame` must hold exactly
    /// `window_len` samples).
    pub(crate) fn analyze(&self, frame: &[f64]) -> Vec<Complex64> {
        assert_eq!(frame.len(), self.config.window_len);
        let mut buf = vec![Complex64::default(); self.config.fft_size];
        for (slot, (&s, &wj)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
            *slot = Complex64::new(s * wj, 0.0);
        }
        self.fft.process(&mut buf);
        buf.truncate(self.config.num_bins());
        buf
    }

    /// Synthesis-window-weighted time frame for one one-sided spectrum: the
    /// overlap-add contribution before envelope normalization.
    pub(crate) fn synthesize(&self, bins: &[Complex64]) -> Vec<f64> {
        let num_bins = self.config.num_bins();
        assert_eq!(bins.len(), num_bins);
        let mut buf = vec![Complex64::default(); self.config.fft_size];
        buf[0] = bins[0];
        buf[self.config.fft_size / 2] = bins[num_bins - 1];
        for f in 1..num_bins - 1 {
            buf[f] = bins[f];
            buf[self.config.fft_size - f] = bins[f].conj();
        }
        self.ifft.process(&mut buf);
        let scale = 1.0 / self.config.fft_size as f64;
        (0..self.config.window_len)
            .map(|j| buf[j].re * scale * self.window[j])
            .collect()
    }
}

/// Windowed forward transform. Frame `t` covers samples
/// `t*hop_len .. t*hop_len + window_len`, zero-padded past the end.
pub fn stft(x: &Waveform, config: &FramingConfig) -> Result<ComplexSpectrogram> {
    if x.samples.is_empty() {
        return Err(Error::Data("empty waveform".into()));
    }
    if let Some(i) = x.samples.iter().position(|s| !s.is_finite()) {
        return Err(Error::Data(format!("non-finite sample at index {i}")));
    }
    let codec = FrameCodec::new(config);
    let num_frames = config.num_frames(x.samples.len());
    let num_bins = config.num_bins();
    let mut bins = Array2::default((num_frames, num_bins));
    let mut frame = vec![0.0f64; config.window_len];
    for t in 0..num_frames {
        let start = t * config.hop_len;
        for (j, slot) in frame.iter_mut().enumerate() {
            *slot = x.samples.get(start + j).copied().unwrap_or(0.0);
        }
        let spec = codec.analyze(&frame);
        for f in 0..num_bins {
            bins[(t, f)] = spec[f];
        }
    }
    Ok(ComplexSpectrogram {
        bins,
        config: *config,
        num_samples: x.samples.len(),
    })
}

/// Weighted overlap-add inverse of [`stft`]. Each reconstructed frame is
/// weighted by the analysis window and the sum is normalized by the
/// accumulated squared-window envelope, which inverts the analysis exactly
/// at every position the envelope covers. Positions with zero envelope
/// (sample 0 carries zero window weight) come back as 0.
pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform> {
    let config = &s.config;
    let num_bins = config.num_bins();
    if s.bins.ncols() != num_bins {
        return Err(Error::Shape(format!(
            "spectrogram has {} bins, config implies {num_bins}",
            s.bins.ncols()
        )));
    }
    let num_frames = s.bins.nrows();
    if num_frames == 0 {
        return Err(Error::Shape("spectrogram has no frames".into()));
    }
    if num_frames != config.num_frames(s.num_samples) {
        return Err(Error::Shape(format!(
            "spectrogram has {num_frames} frames, num_samples {} implies {}",
            s.num_samples,
            config.num_frames(s.num_samples)
        )));
    }
    let codec = FrameCodec::new(config);
    let w = codec.window();
    let full_len = (num_frames - 1) * config.hop_len + config.window_len;
    let mut acc = vec![0.0f64; full_len];
    let mut env = vec![0.0f64; full_len];
    let mut row = vec![Complex64::default(); num_bins];
    for t in 0..num_frames {
        for f in 0..num_bins {
            row[f] = s.bins[(t, f)];
        }
        let contrib = codec.synthesize(&row);
        let start = t * config.hop_len;
        for (j, &wj) in w.iter().enumerate() {
            acc[start + j] += contrib[j];
            env[start + j] += wj * wj;
        }
    }
    let mut samples = Vec::with_capacity(s.num_samples);
    for n in 0..s.num_samples.min(full_len) {
        samples.push(if env[n] > 0.0 { acc[n] / env[n] } else { 0.0 });
    }
    samples.resize(s.num_samples, 0.0);
    Waveform::new(samples)
}

/// Elementwise `ln(|X| + LOG_FLOOR)`, frames x bins.
pub fn log_magnitude(s: &ComplexSpectrogram) -> Array2<f64> {
    s.bins.map(|c| (c.norm() + LOG_FLOOR).ln())
}

/// Per-bin activity flags: a bin is active when its magnitude is strictly
/// above `max_magnitude * 10^(-threshold_db/20)`.
#[derive(Debug, Clone)]
pub struct VadMask {
    pub active: Array2<bool>,
    pub threshold_db: f64,
}

impl VadMask {
    pub fn num_active(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

pub fn vad_mask(s: &ComplexSpectrogram, threshold_db: f64) -> Result<VadMask> {
    if !(threshold_db.is_finite() && threshold_db > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "vad threshold {threshold_db} dB must be positive"
        )));
    }
    let max_mag = s.bins.iter().map(|c| c.norm()).fold(0.0f64, f64::max);
    let cutoff = max_mag * 10f64.powf(-threshold_db / 20.0);
    let active = s.bins.map(|c| c.norm() > cutoff);
    Ok(VadMask {
        active,
        threshold_db,
    })
}

/// Binary time-frequency masks that partition the plane: every bin belongs
/// to exactly one source.
#[derive(Debug, Clone)]
pub struct BinaryMaskSet {
    masks: Vec<Array2<bool>>,
}

impl BinaryMaskSet {
    pub fn new(masks: Vec<Array2<bool>>) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::Shape("mask set must contain at least one mask".into()));
        }
        let dim = masks[0].dim();
        for m in &masks[1..] {
            if m.dim() != dim {
                return Err(Error::Shape(format!(
                    "mask dims {:?} differ from {:?}",
                    m.dim(),
                    dim
                )));
            }
        }
        for t in 0..dim.0 {
            for f in 0..dim.1 {
                let owners = masks.iter().filter(|m| m[(t, f)]).count();
                if owners != 1 {
                    return Err(Error::Shape(format!(
                        "bin ({t}, {f}) belongs to {owners} masks, expected exactly 1"
                    )));
                }
            }
        }
        Ok(Self { masks })
    }

    /// Build from per-bin labels in frame-major order (`labels[t*num_bins + f]`).
    pub fn from_labels(
        labels: &[usize],
        num_frames: usize,
        num_bins: usize,
        num_sources: usize,
    ) -> Result<Self> {
        if labels.len() != num_frames * num_bins {
            return Err(Error::Shape(format!(
                "{} labels for {num_frames} x {num_bins} bins",
                labels.len()
            )));
        }
        if num_sources == 0 {
            return Err(Error::Shape("mask set must contain at least one mask".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_sources) {
            return Err(Error::Shape(format!(
                "label {bad} out of range for {num_sources} sources"
            )));
        }
        let mut masks =
            vec![Array2::from_elem((num_frames, num_bins), false); num_sources];
        for t in 0..num_frames {
            for f in 0..num_bins {
                masks[labels[t * num_bins + f]][(t, f)] = true;
            }
        }
        Ok(Self { masks })
    }

    pub fn num_sources(&self) -> usize {
        self.masks.len()
    }

    pub fn masks(&self) -> &[Array2<bool>] {
        &self.masks
    }
}

/// Apply each mask to the mixture spectrogram, zeroing bins outside it.
pub fn apply_masks(
    s: &ComplexSpectrogram,
    masks: &BinaryMaskSet,
) -> Result<Vec<ComplexSpectrogram>> {
    let dim = s.bins.dim();
    if masks.masks[0].dim() != dim {
        return Err(Error::Shape(format!(
            "mask dims {:?} differ from spectrogram {:?}",
            masks.masks[0].dim(),
            dim
        )));
    }
    Ok(masks
        .masks
        .iter()
        .map(|m| {
            let mut bins = s.bins.clone();
            bins.zip_mut_with(m, |b, &keep| {
                if !keep {
                    *b = Complex64::default();
                }
            });
            ComplexSpectrogram {
                bins,
                config: s.config,
                num_samples: s.num_samples,
            }
        })
        .collect())
}

/// Signal-to-noise ratio of `estimate` against `reference`, in dB.
/// Exact match gives +inf.
pub fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
    assert_eq!(reference.len(), estimate.len(), "length mismatch");
    let sig: f64 = reference.iter().map(|r| r * r).sum();
    let err: f64 = reference
        .iter()
        .zip(estimate)
        .map(|(r, e)| (r - e) * (r - e))
        .sum();
    if err == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (sig / err).log10()
    }
}
