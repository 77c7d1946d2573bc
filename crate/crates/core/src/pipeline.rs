//! End-to-end separation: offline full-signal clustering, and an online
//! separator that estimates cluster centres from a leading buffer and then
//! masks frame by frame with one window of algorithmic latency.

use ndarray::Array1;
use rustfft::num_complex::Complex64;

use crate::cluster::{
    assign_nearest, estimate_centres_from_buffer, gather_active_rows, CentreSource,
    ClusterCentres, KmeansConfig,
};
use crate::dsp::{
    apply_masks, istft, log_magnitude, stft, vad_mask, BinaryMaskSet, FrameCodec, FramingConfig,
    Waveform, LOG_FLOOR, SAMPLE_RATE,
};
use crate::error::{Error, Result};
use crate::net::{forward_batch, LstmState, NetworkParams};

/// Output delay inherent to the synthesis frame length, independent of hop
/// and of compute speed.
pub fn algorithmic_latency_ms(config: &FramingConfig) -> f64 {
    config.window_len as f64 * 1000.0 / SAMPLE_RATE as f64
}

#[derive(Debug, Clone)]
pub struct SeparateOptions {
    pub vad_threshold_db: f64,
    pub kmeans: KmeansConfig,
}

impl Default for SeparateOptions {
    fn default() -> Self {
        SeparateOptions {
            vad_threshold_db: 40.0,
            kmeans: KmeansConfig::default(),
        }
    }
}

impl SeparateOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.vad_threshold_db.is_finite() && self.vad_threshold_db > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "activity threshold {} dB must be positive",
                self.vad_threshold_db
            )));
        }
        if self.kmeans.k < 2 {
            return Err(Error::InvalidConfig(
                "separation needs at least two sources".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SeparationMode {
    Offline,
    Online,
}

/// Separated sources plus provenance. Sources always span the full input;
/// in online mode the first `passthrough_samples` of every source hold the
/// unseparated mixture, and `separated` is false when the stream ended
/// before its buffer filled.
#[derive(Debug, Clone)]
pub struct SeparationResult {
    pub sources: Vec<Waveform>,
    pub mode: SeparationMode,
    pub buffer_ms: Option<f64>,
    pub latency_ms: f64,
    pub passthrough_samples: usize,
    pub separated: bool,
    pub buffer_quality_ratio: Option<f64>,
}

/// Full-signal separation: embed every frame, cluster the active bins,
/// label all bins by nearest centre, mask, and resynthesize.
pub fn separate_offline(
    params: &NetworkParams,
    mixture: &Waveform,
    options: &SeparateOptions,
) -> Result<SeparationResult> {
    params.validate()?;
    options.validate()?;
    let framing = params.framing;
    if mixture.len() < framing.window_len {
        return Err(Error::InvalidConfig(format!(
            "mixture of {} samples is shorter than one {}-sample window",
            mixture.len(),
            framing.window_len
        )));
    }
    let spec = stft(mixture, &framing)?;
    let features = log_magnitude(&spec);
    let emb = forward_batch(params, &features)?;
    let vad = vad_mask(&spec, options.vad_threshold_db)?;
    let points = gather_active_rows(emb.rows.view(), &vad, emb.num_bins);
    if points.nrows() < options.kmeans.k {
        return Err(Error::InsufficientEvidence(format!(
            "{} active bins cannot support {} clusters",
            points.nrows(),
            options.kmeans.k
        )));
    }
    let fit = crate::cluster::kmeans_fit(points.view(), &options.kmeans)?;
    let centres = ClusterCentres::new(fit.centres, CentreSource::FullSignal, None)?;
    let labels = assign_nearest(&centres, emb.rows.view())?;
    let masks = BinaryMaskSet::from_labels(
        &labels,
        spec.num_frames(),
        spec.num_bins(),
        options.kmeans.k,
    )?;
    let sources = apply_masks(&spec, &masks)?
        .iter()
        .map(istft)
        .collect::<Result<Vec<_>>>()?;
    Ok(SeparationResult {
        sources,
        mode: SeparationMode::Offline,
        buffer_ms: None,
        latency_ms: algorithmic_latency_ms(&framing),
        passthrough_samples: 0,
        separated: true,
        buffer_quality_ratio: None,
    })
}

enum Phase {
    Buffering,
    Separating {
        centres: ClusterCentres,
        state: LstmState,
        quality_ratio: f64,
    },
}

/// Streaming separator. Counters drive all processing, so output is a pure
/// function of the sample stream regardless of push chunking. Input and
/// emitted history are retained for the final [`OnlineSeparator::flush`]
/// result; memory grows with stream length.
pub struct OnlineSeparator {
    params: NetworkParams,
    options: SeparateOptions,
    codec: FrameCodec,
    buffer_target: usize,
    buffer_ms: f64,
    phase: Phase,
    input: Vec<f64>,
    acc: Vec<Vec<f64>>,
    env: Vec<f64>,
    history: Vec<Vec<f64>>,
    emitted_len: usize,
    next_frame: usize,
    passthrough_end: Option<usize>,
    closed: bool,
}

/// Starts a stream in the buffering phase. The buffer must cover at least
/// one analysis window; the network must be unidirectional.
pub fn online_init(
    params: &NetworkParams,
    options: &SeparateOptions,
    buffer_ms: f64,
) -> Result<OnlineSeparator> {
    params.validate()?;
    options.validate()?;
    if params.bidirectional() {
        return Err(Error::UnsupportedMode(
            "bidirectional network cannot run frame-by-frame".into(),
        ));
    }
    if !(buffer_ms.is_finite() && buffer_ms > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "buffer duration {buffer_ms} ms must be positive"
        )));
    }
    let framing = params.framing;
    let buffer_target = (buffer_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize;
    if buffer_target < framing.window_len {
        return Err(Error::InvalidConfig(format!(
            "buffer of {buffer_ms} ms ({buffer_target} samples) is shorter than one \
             {}-sample window",
            framing.window_len
        )));
    }
    let k = options.kmeans.k;
    Ok(OnlineSeparator {
        params: params.clone(),
        options: options.clone(),
        codec: FrameCodec::new(&framing),
        buffer_target,
        buffer_ms,
        phase: Phase::Buffering,
        input: Vec::new(),
        acc: vec![Vec::new(); k],
        env: Vec::new(),
        history: vec![Vec::new(); k],
        emitted_len: 0,
        next_frame: 0,
        passthrough_end: None,
        closed: false,
    })
}

impl OnlineSeparator {
    fn num_sources(&self) -> usize {
        self.options.kmeans.k
    }

    pub fn buffer_target_samples(&self) -> usize {
        self.buffer_target
    }

    pub fn samples_pushed(&self) -> usize {
        self.input.len()
    }

    pub fn samples_emitted(&self) -> usize {
        self.emitted_len
    }

    pub fn is_separating(&self) -> bool {
        matches!(self.phase, Phase::Separating { .. })
    }

    pub fn centres(&self) -> Option<&ClusterCentres> {
        match &self.phase {
            Phase::Separating { centres, .. } => Some(centres),
            Phase::Buffering => None,
        }
    }

    pub fn buffer_quality_ratio(&self) -> Option<f64> {
        match &self.phase {
            Phase::Separating { quality_ratio, .. } => Some(*quality_ratio),
            Phase::Buffering => None,
        }
    }

    /// Appends samples and returns one finished chunk per source. Output
    /// trails input by exactly one window length; before the separation
    /// boundary every source carries the mixture itself.
    pub fn push_samples(&mut self, samples: &[f64]) -> Result<Vec<Vec<f64>>> {
        if self.closed {
            return Err(Error::State("samples pushed after flush".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Data(format!("non-finite sample at index {i}")));
        }
        self.input.extend_from_slice(samples);
        self.maybe_start_separating()?;
        self.process_complete_frames()?;
        let target = self
            .input
            .len()
            .saturating_sub(self.params.framing.window_len);
        Ok(self.emit(target))
    }

    /// Drains the overlap-add tails (synthesizing the same zero-padded final
    /// frame the batch analysis would) and closes the stream. Returns the
    /// tail chunks plus the full-length result; total output length equals
    /// total input length.
    pub fn flush(&mut self) -> Result<(Vec<Vec<f64>>, SeparationResult)> {
        if self.closed {
            return Err(Error::State("stream already flushed".into()));
        }
        self.closed = true;
        let n = self.input.len();
        if n == 0 {
            return Err(Error::Data("flushed a stream with no samples".into()));
        }
        if self.is_separating() {
            let framing = self.params.framing;
            let total_frames = framing.num_frames(n);
            while self.next_frame < total_frames {
                let start = self.next_frame * framing.hop_len;
                let frame: Vec<f64> = (0..framing.window_len)
                    .map(|j| self.input.get(start + j).copied().unwrap_or(0.0))
                    .collect();
                self.process_frame(&frame, start)?;
                self.next_frame += 1;
            }
        }
        let tail = self.emit(n);
        let separated = self.is_separating();
        let passthrough_samples = match self.passthrough_end {
            Some(p) => p.min(n),
            None => n,
        };
        let sources = self
            .history
            .iter()
            .map(|h| Waveform::new(h.clone()))
            .collect::<Result<Vec<_>>>()?;
        let result = SeparationResult {
            sources,
            mode: SeparationMode::Online,
            buffer_ms: Some(self.buffer_ms),
            latency_ms: algorithmic_latency_ms(&self.params.framing),
            passthrough_samples,
            separated,
            buffer_quality_ratio: self.buffer_quality_ratio(),
        };
        Ok((tail, result))
    }

    /// One-shot centre estimation the moment the buffer fills. The carried
    /// recurrent state keeps the recurrence causally continuous; centres are
    /// frozen from here on. A failed estimate poisons the stream.
    fn maybe_start_separating(&mut self) -> Result<()> {
        if self.is_separating() || self.input.len() < self.buffer_target {
            return Ok(());
        }
        let buffer = Waveform::new(self.input[..self.buffer_target].to_vec())?;
        let est = match estimate_centres_from_buffer(
            &self.params,
            &buffer,
            &self.options.kmeans,
            self.options.vad_threshold_db,
        ) {
            Ok(est) => est,
            Err(e) => {
                self.closed = true;
                return Err(e);
            }
        };
        let framing = self.params.framing;
        self.next_frame = est.frames_used;
        // First fully mask-covered sample: every frame touching it is ours.
        self.passthrough_end =
            Some((est.frames_used - 1) * framing.hop_len + framing.window_len);
        self.phase = Phase::Separating {
            centres: est.centres,
            state: est.state,
            quality_ratio: est.quality_ratio,
        };
        Ok(())
    }

    fn process_complete_frames(&mut self) -> Result<()> {
        if !self.is_separating() {
            return Ok(());
        }
        let framing = self.params.framing;
        while self.next_frame * framing.hop_len + framing.window_len <= self.input.len() {
            let start = self.next_frame * framing.hop_len;
            let frame = self.input[start..start + framing.window_len].to_vec();
            self.process_frame(&frame, start)?;
            self.next_frame += 1;
        }
        Ok(())
    }

    /// Analyze, embed, label by nearest centre, and overlap-add one masked
    /// frame per source. Mirrors the batch path operation for operation.
    fn process_frame(&mut self, frame: &[f64], start: usize) -> Result<()> {
        let bins = self.codec.analyze(frame);
        let features =
            Array1::from_iter(bins.iter().map(|c| (c.norm() + LOG_FLOOR).ln()));
        let Phase::Separating { centres, state, .. } = &mut self.phase else {
            unreachable!("frames are only processed while separating");
        };
        let rows = crate::net::forward_streaming(&self.params, features.view(), state)?;
        let labels = assign_nearest(centres, rows.view())?;

        let end = start + self.params.framing.window_len;
        if self.env.len() < end {
            self.env.resize(end, 0.0);
            for a in &mut self.acc {
                a.resize(end, 0.0);
            }
        }
        for c in 0..self.num_sources() {
            let masked: Vec<Complex64> = bins
                .iter()
                .enumerate()
                .map(|(f, &b)| if labels[f] == c { b } else { Complex64::default() })
                .collect();
            let contrib = self.codec.synthesize(&masked);
            for (j, &v) in contrib.iter().enumerate() {
                self.acc[c][start + j] += v;
            }
        }
        let window = self.codec.window();
        for (j, &wj) in window.iter().enumerate() {
            self.env[start + j] += wj * wj;
        }
        Ok(())
    }

    /// Emits samples up to `target`: mixture passthrough before the
    /// separation boundary, normalized overlap-add after it.
    fn emit(&mut self, target: usize) -> Vec<Vec<f64>> {
        let k = self.num_sources();
        let boundary = self.passthrough_end.unwrap_or(usize::MAX);
        let mut chunks = vec![Vec::with_capacity(target - self.emitted_len.min(target)); k];
        while self.emitted_len < target {
            let n = self.emitted_len;
            if n < boundary {
                let v = self.input[n];
                for chunk in &mut chunks {
                    chunk.push(v);
                }
            } else {
                for (c, chunk) in chunks.iter_mut().enumerate() {
                    let v = if self.env[n] > 0.0 {
                        self.acc[c][n] / self.env[n]
                    } else {
                        0.0
                    };
                    chunk.push(v);
                }
            }
            self.emitted_len += 1;
        }
        for (c, chunk) in chunks.iter().enumerate() {
            self.history[c].extend_from_slice(chunk);
        }
        chunks
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::TAU;

    fn tiny_params(seed: u64) -> NetworkParams {
        let framing = FramingConfig::new(64, 32, 256).unwrap();
        init_params(framing, 8, 1, 16, false, seed).unwrap()
    }

    fn test_mixture(n: usize) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        Waveform::new(
            (0..n)
                .map(|i| {
                    let t = i as f64 / SAMPLE_RATE as f64;
                    0.35 * (TAU * 313.0 * t).sin()
                        + 0.35 * (TAU * 1970.0 * t).sin()
                        + rng.gen_range(-0.01..0.01)
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn latency_follows_the_window_and_ignores_the_hop() {
        let short = FramingConfig::new(64, 32, 256).unwrap();
        let long = FramingConfig::new(256, 64, 256).unwrap();
        assert_eq!(algorithmic_latency_ms(&short), 8.0);
        assert_eq!(algorithmic_latency_ms(&long), 32.0);
        let other_hop = FramingConfig::new(64, 16, 256).unwrap();
        assert_eq!(algorithmic_latency_ms(&other_hop), 8.0);
        let wide_hop = FramingConfig::new(256, 128, 256).unwrap();
        assert_eq!(algorithmic_latency_ms(&wide_hop), 32.0);
    }

    #[test]
    fn offline_sources_partition_the_reconstruction() {
        let params = tiny_params(1);
        let mix = test_mixture(2000);
        let result = separate_offline(&params, &mix, &SeparateOptions::default()).unwrap();
        assert_eq!(result.mode, SeparationMode::Offline);
        assert_eq!(result.passthrough_samples, 0);
        assert!(result.separated);
        assert_eq!(result.latency_ms, 8.0);
        assert_eq!(result.sources.len(), 2);
        let recon = istft(&stft(&mix, &params.framing).unwrap()).unwrap();
        let scale: f64 = recon.samples.iter().map(|v| v * v).sum::<f64>().sqrt();
        for n in 0..mix.len() {
            assert_eq!(result.sources[0].samples.len(), mix.len());
            let sum = result.sources[0].samples[n] + result.sources[1].samples[n];
            assert!(
                (sum - recon.samples[n]).abs() <= 1e-6 * scale,
                "sample {n}: {sum} vs {}",
                recon.samples[n]
            );
        }
    }

    #[test]
    fn offline_runs_are_bit_identical() {
        let params = tiny_params(2);
        let mix = test_mixture(1500);
        let opts = SeparateOptions::default();
        let a = separate_offline(&params, &mix, &opts).unwrap();
        let b = separate_offline(&params, &mix, &opts).unwrap();
        for c in 0..2 {
            assert_eq!(a.sources[c].samples, b.sources[c].samples);
        }
    }

    #[test]
    fn offline_rejects_silence_and_short_input() {
        let params = tiny_params(3);
        let silence = Waveform::new(vec![0.0; 1000]).unwrap();
        assert!(matches!(
            separate_offline(&params, &silence, &SeparateOptions::default()),
            Err(Error::InsufficientEvidence(_))
        ));
        let short = Waveform::new(vec![0.1; 63]).unwrap();
        assert!(matches!(
            separate_offline(&params, &short, &SeparateOptions::default()),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn init_validates_buffer_and_directionality() {
        let params = tiny_params(4);
        let opts = SeparateOptions::default();
        assert!(matches!(
            online_init(&params, &opts, 4.0),
            Err(Error::InvalidConfig(_))
        ));
        let sep = online_init(&params, &opts, 1500.0).unwrap();
        assert_eq!(sep.buffer_target_samples(), 12000);
        assert!(online_init(&params, &opts, 100.0).is_ok());
        assert!(online_init(&params, &opts, 8.0).is_ok());

        let framing = FramingConfig::new(64, 32, 256).unwrap();
        let bidir = init_params(framing, 8, 1, 16, true, 4).unwrap();
        assert!(matches!(
            online_init(&bidir, &opts, 1500.0),
            Err(Error::UnsupportedMode(_))
        ));
    }

    #[test]
    fn output_trails_input_by_exactly_one_window() {
        let params = tiny_params(5);
        let mix = test_mixture(3000);
        let mut sep = online_init(&params, &SeparateOptions::default(), 100.0).unwrap();
        let mut total_out = 0;
        for chunk in mix.samples.chunks(113) {
            let out = sep.push_samples(chunk).unwrap();
            assert_eq!(out[0].len(), out[1].len());
            total_out += out[0].len();
            assert_eq!(total_out, sep.samples_pushed().saturating_sub(64));
            assert_eq!(total_out, sep.samples_emitted());
        }
        let (tail, result) = sep.flush().unwrap();
        total_out += tail[0].len();
        assert_eq!(total_out, 3000);
        assert_eq!(result.sources[0].samples.len(), 3000);
        assert_eq!(result.sources[1].samples.len(), 3000);
    }

    /// The streaming path, fed any way at all, must equal a batch rerun of
    /// the same math: buffer centres, full-signal forward, nearest-centre
    /// labels, masked ISTFT. Exact equality, not approximate.
    #[test]
    fn online_output_matches_the_batch_oracle_exactly() {
        let params = tiny_params(6);
        let framing = params.framing;
        // 6030 leaves a partial hop so the padded tail frame is exercised.
        let mix = test_mixture(6030);
        let opts = SeparateOptions::default();
        let mut sep = online_init(&params, &opts, 100.0).unwrap();
        let mut outs = vec![Vec::new(); 2];
        for chunk in mix.samples.chunks(160) {
            for (c, part) in sep.push_samples(chunk).unwrap().into_iter().enumerate() {
                outs[c].extend(part);
            }
        }
        let (tail, result) = sep.flush().unwrap();
        for (c, part) in tail.into_iter().enumerate() {
            outs[c].extend(part);
        }
        assert_eq!(result.passthrough_samples, 800);
        assert_eq!(result.buffer_ms, Some(100.0));
        assert_eq!(result.latency_ms, 8.0);
        assert!(result.separated);
        assert!(result.buffer_quality_ratio.unwrap().is_finite());

        // Streamed chunks and the result's full sources agree.
        for c in 0..2 {
            assert_eq!(outs[c], result.sources[c].samples);
        }
        // Passthrough region is the mixture verbatim on every source.
        for n in 0..800 {
            assert_eq!(outs[0][n], mix.samples[n]);
            assert_eq!(outs[1][n], mix.samples[n]);
        }

        // Batch oracle.
        let buffer = Waveform::new(mix.samples[..800].to_vec()).unwrap();
        let est =
            estimate_centres_from_buffer(&params, &buffer, &opts.kmeans, opts.vad_threshold_db)
                .unwrap();
        let spec = stft(&mix, &framing).unwrap();
        let emb = forward_batch(&params, &log_magnitude(&spec)).unwrap();
        let labels = assign_nearest(&est.centres, emb.rows.view()).unwrap();
        let masks =
            BinaryMaskSet::from_labels(&labels, spec.num_frames(), spec.num_bins(), 2).unwrap();
        let oracle: Vec<Waveform> = apply_masks(&spec, &masks)
            .unwrap()
            .iter()
            .map(|m| istft(m).unwrap())
            .collect();
        for c in 0..2 {
            for n in 800..6030 {
                assert!(
                    outs[c][n] == oracle[c].samples[n],
                    "source {c} sample {n}: {} vs {}",
                    outs[c][n],
                    oracle[c].samples[n]
                );
            }
        }

        // Sources partition the reconstruction over the separated region.
        let recon = istft(&spec).unwrap();
        let scale: f64 = recon.samples.iter().map(|v| v * v).sum::<f64>().sqrt();
        for n in 800..6030 {
            let sum = outs[0][n] + outs[1][n];
            assert!((sum - recon.samples[n]).abs() <= 1e-6 * scale, "sample {n}");
        }
    }

    #[test]
    fn chunk_size_does_not_change_a_single_bit() {
        let params = tiny_params(7);
        let mix = test_mixture(3000);
        let opts = SeparateOptions::default();
        let run = |sizes: &dyn Fn(usize) -> usize| -> Vec<Vec<f64>> {
            let mut sep = online_init(&params, &opts, 100.0).unwrap();
            let mut fed = 0;
            while fed < mix.samples.len() {
                let take = sizes(fed).min(mix.samples.len() - fed);
                sep.push_samples(&mix.samples[fed..fed + take]).unwrap();
                fed += take;
            }
            let (_, result) = sep.flush().unwrap();
            result.sources.into_iter().map(|w| w.samples).collect()
        };
        let whole = run(&|_| usize::MAX);
        let ones = run(&|_| 1);
        let sevens = run(&|_| 7);
        let blocks = run(&|_| 160);
        let mixed = run(&|fed| [3, 11, 160, 1, 59][fed % 5]);
        assert_eq!(whole, ones);
        assert_eq!(whole, sevens);
        assert_eq!(whole, blocks);
        assert_eq!(whole, mixed);
    }

    #[test]
    fn full_length_buffer_reproduces_offline_clustering() {
        let params = tiny_params(8);
        // 1600 samples frame the signal exactly: (1600 - 64) % 32 == 0.
        let mix = test_mixture(1600);
        let opts = SeparateOptions::default();
        let mut sep = online_init(&params, &opts, 200.0).unwrap();
        assert_eq!(sep.buffer_target_samples(), 1600);
        sep.push_samples(&mix.samples).unwrap();
        let online_centres = sep.centres().unwrap().centres.clone();

        // Offline clustering over the same utterance, same seed.
        let spec = stft(&mix, &params.framing).unwrap();
        let emb = forward_batch(&params, &log_magnitude(&spec)).unwrap();
        let vad = vad_mask(&spec, opts.vad_threshold_db).unwrap();
        let points = gather_active_rows(emb.rows.view(), &vad, emb.num_bins);
        let fit = crate::cluster::kmeans_fit(points.view(), &opts.kmeans).unwrap();
        assert_eq!(online_centres, fit.centres);

        let offline_centres =
            ClusterCentres::new(fit.centres, CentreSource::FullSignal, None).unwrap();
        let offline_labels = assign_nearest(&offline_centres, emb.rows.view()).unwrap();
        let online_labels = assign_nearest(sep.centres().unwrap(), emb.rows.view()).unwrap();
        assert_eq!(offline_labels, online_labels);

        // Whole signal inside the buffer: the output is pure passthrough.
        let (_, result) = sep.flush().unwrap();
        assert_eq!(result.passthrough_samples, 1600);
        assert!(result.separated);
        for c in 0..2 {
            assert_eq!(result.sources[c].samples, mix.samples);
        }
    }

    #[test]
    fn flush_while_buffering_is_flagged_passthrough() {
        let params = tiny_params(9);
        let mix = test_mixture(1000);
        let mut sep = online_init(&params, &SeparateOptions::default(), 1000.0).unwrap();
        let out = sep.push_samples(&mix.samples).unwrap();
        assert_eq!(out[0].len(), 936);
        let (tail, result) = sep.flush().unwrap();
        assert_eq!(tail[0].len(), 64);
        assert!(!result.separated);
        assert_eq!(result.passthrough_samples, 1000);
        assert!(result.buffer_quality_ratio.is_none());
        for c in 0..2 {
            assert_eq!(result.sources[c].samples, mix.samples);
        }
    }

    #[test]
    fn closed_streams_reject_further_calls() {
        let params = tiny_params(10);
        let mut sep = online_init(&params, &SeparateOptions::default(), 100.0).unwrap();
        sep.push_samples(&test_mixture(1200).samples).unwrap();
        sep.flush().unwrap();
        assert!(matches!(sep.flush(), Err(Error::State(_))));
        assert!(matches!(
            sep.push_samples(&[0.0]),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn bad_pushes_and_empty_flush_error() {
        let params = tiny_params(11);
        let mut sep = online_init(&params, &SeparateOptions::default(), 100.0).unwrap();
        assert!(matches!(
            sep.push_samples(&[f64::NAN]),
            Err(Error::Data(_))
        ));
        let mut fresh = online_init(&params, &SeparateOptions::default(), 100.0).unwrap();
        assert!(matches!(fresh.flush(), Err(Error::Data(_))));
    }

    #[test]
    fn silent_buffer_poisons_the_stream() {
        let params = tiny_params(12);
        let mut sep = online_init(&params, &SeparateOptions::default(), 100.0).unwrap();
        let err = sep.push_samples(&vec![0.0; 800]).unwrap_err();
        assert!(matches!(err, Error::InsufficientEvidence(_)));
        assert!(matches!(
            sep.push_samples(&[0.1]),
            Err(Error::State(_))
        ));
    }
}
