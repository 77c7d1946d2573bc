//! WAV file I/O. Only 16-bit PCM mono at 8 kHz is accepted or produced.

use std::path::Path;

use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

const SPEC: hound::WavSpec = hound::WavSpec {
    channels: 1,
    sample_rate: SAMPLE_RATE,
    bits_per_sample: 16,
    sample_format: hound::SampleFormat::Int,
};

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec != SPEC {
        return Err(Error::Data(format!(
            "{}: expected 16-bit PCM mono at {SAMPLE_RATE} Hz, got {} ch {} Hz {}-bit {:?}",
            path.display(),
            spec.channels,
            spec.sample_rate,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples: Vec<f64> = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if samples.is_empty() {
        return Err(Error::Data(format!("{}: no samples", path.display())));
    }
    Waveform::new(samples)
}

/// Samples are clamped to [-1, 1) and quantized to 16 bits.
pub fn write_wav(path: &Path, x: &Waveform) -> Result<()> {
    if x.samples.is_empty() {
        return Err(Error::Data("refusing to write empty waveform".into()));
    }
    let mut writer = hound::WavWriter::create(path, SPEC)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for &s in &x.samples {
        if !s.is_finite() {
            return Err(Error::Data("non-finite sample".into()));
        }
        let q = (s * 32768.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer
            .write_sample(q)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}
