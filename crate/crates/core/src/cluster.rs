//! k-means over embedding rows, buffer-based centre estimation for the
//! streaming path, and nearest-centre assignment.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dsp::{log_magnitude, stft, vad_mask, VadMask, Waveform};
use crate::error::{Error, Result};
use crate::net::{forward_streaming, LstmState, NetworkParams};

/// Where a set of centres was estimated from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CentreSource {
    FullSignal,
    Buffer,
}

/// Cluster centres, one row per source.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterCentres {
    pub centres: Array2<f64>,
    pub source: CentreSource,
    /// Buffer duration in milliseconds when `source == Buffer`.
    pub buffer_ms: Option<f64>,
}

impl ClusterCentres {
    pub fn new(centres: Array2<f64>, source: CentreSource, buffer_ms: Option<f64>) -> Result<Self> {
        if centres.nrows() < 2 {
            return Err(Error::InvalidConfig(format!(
                "{} cluster centres, need at least 2",
                centres.nrows()
            )));
        }
        if centres.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                tensor: "centres".into(),
                detail: "non-finite centre".into(),
            });
        }
        Ok(Self {
            centres,
            source,
            buffer_ms,
        })
    }

    pub fn k(&self) -> usize {
        self.centres.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KmeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self {
            k: 2,
            restarts: 10,
            max_iter: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KmeansFit {
    pub centres: Array2<f64>,
    pub assignments: Vec<usize>,
    pub sse: f64,
}

fn dist2(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

/// Labels plus per-point squared distance and total SSE for fixed centres.
fn assign(points: ArrayView2<f64>, centres: &Array2<f64>) -> (Vec<usize>, Vec<f64>, f64) {
    let n = points.nrows();
    let mut labels = vec![0usize; n];
    let mut d2 = vec![0.0f64; n];
    let mut sse = 0.0;
    for p in 0..n {
        let row = points.row(p);
        let mut best = dist2(row, centres.row(0));
        let mut lab = 0;
        for c in 1..centres.nrows() {
            let d = dist2(row, centres.row(c));
            if d < best {
                best = d;
                lab = c;
            }
        }
        labels[p] = lab;
        d2[p] = best;
        sse += best;
    }
    (labels, d2, sse)
}

fn kmeans_pp_seed(points: ArrayView2<f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let d = points.ncols();
    let mut centres = Array2::zeros((k, d));
    let first = rng.gen_range(0..n);
    centres.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|p| dist2(points.row(p), centres.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            // All remaining mass is zero (coincident points); any pick works.
            rng.gen_range(0..n)
        };
        centres.row_mut(c).assign(&points.row(idx));
        for (p, slot) in d2.iter_mut().enumerate() {
            let nd = dist2(points.row(p), centres.row(c));
            if nd < *slot {
                *slot = nd;
            }
        }
    }
    centres
}

fn lloyd(
    points: ArrayView2<f64>,
    k: usize,
    max_iter: usize,
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> KmeansFit {
    let n = points.nrows();
    let d = points.ncols();
    let mut centres = kmeans_pp_seed(points, k, rng);
    let mut prev_sse = f64::INFINITY;
    for _ in 0..max_iter {
        let (mut labels, mut d2, mut sse) = assign(points, &centres);
        // Reseed empty clusters to the point farthest from its own centre;
        // each stolen point is claimed at most once per pass.
        let mut counts = vec![0usize; k];
        for &lab in &labels {
            counts[lab] += 1;
        }
        let mut stolen = vec![false; n];
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&p| !stolen[p])
                    .max_by(|&a, &b| d2[a].total_cmp(&d2[b]))
                    .expect("n >= k leaves a point to steal");
                stolen[far] = true;
                counts[labels[far]] -= 1;
                counts[c] += 1;
                sse -= d2[far];
                d2[far] = 0.0;
                labels[far] = c;
                let row = points.row(far).to_owned();
                centres.row_mut(c).assign(&row);
            }
        }
        assert!(
            sse <= prev_sse * (1.0 + 1e-9) + 1e-30,
            "SSE must not increase: {prev_sse} -> {sse}"
        );
        let converged =
            prev_sse.is_finite() && (prev_sse - sse).abs() <= tol * prev_sse.max(1e-300);
        prev_sse = sse;
        if converged {
            break;
        }
        // Mean update; reseeding left every cluster nonempty.
        let mut sums = Array2::<f64>::zeros((k, d));
        for (p, &lab) in labels.iter().enumerate() {
            let mut row = sums.row_mut(lab);
            row += &points.row(p);
        }
        for c in 0..k {
            let mut row = sums.row_mut(c);
            row /= counts[c] as f64;
        }
        centres = sums;
    }
    // Sync the returned assignment with the final centres.
    let (labels, _, sse) = assign(points, &centres);
    KmeansFit {
        centres,
        assignments: labels,
        sse,
    }
}

/// Best-of-restarts k-means with k-means++ seeding.
pub fn kmeans_fit(points: ArrayView2<f64>, config: &KmeansConfig) -> Result<KmeansFit> {
    let n = points.nrows();
    if config.k == 0 || config.restarts == 0 {
        return Err(Error::InvalidConfig(
            "k and restarts must be positive".into(),
        ));
    }
    if n < config.k {
        return Err(Error::Data(format!(
            "{n} points cannot fill {} clusters",
            config.k
        )));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite point".into()));
    }
    let mut best: Option<KmeansFit> = None;
    for r in 0..config.restarts {
        let mut rng =
            ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(r as u64));
        let fit = lloyd(points, config.k, config.max_iter, config.tol, &mut rng);
        let better = match &best {
            None => true,
            Some(b) => fit.sse < b.sse,
        };
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Squared-Euclidean nearest centre per row; ties go to the lower index.
pub fn assign_nearest(centres: &ClusterCentres, rows: ArrayView2<f64>) -> Result<Vec<usize>> {
    if rows.ncols() != centres.centres.ncols() {
        return Err(Error::Shape(format!(
            "rows have dim {}, centres have dim {}",
            rows.ncols(),
            centres.centres.ncols()
        )));
    }
    Ok(assign(rows, &centres.centres).0)
}

/// Centres estimated from the head of a stream, plus everything needed to
/// continue processing where the buffer ended.
#[derive(Debug, Clone)]
pub struct BufferEstimate {
    pub centres: ClusterCentres,
    /// Recurrent state after the last full buffer frame.
    pub state: LstmState,
    /// Between-centre distance over within-cluster RMS radius; values below
    /// 1 mean the buffer did not separate into distinct clusters.
    pub quality_ratio: f64,
    pub active_rows: usize,
    /// Full frames consumed; streaming continues at this frame index.
    pub frames_used: usize,
}

impl BufferEstimate {
    pub fn degenerate(&self) -> bool {
        self.quality_ratio < 1.0
    }
}

/// Run the network over every full frame of the buffer, fit k-means to the
/// activity-gated embedding rows, and hand back centres plus the carried
/// recurrent state.
pub fn estimate_centres_from_buffer(
    params: &NetworkParams,
    buffer: &Waveform,
    kmeans: &KmeansConfig,
    vad_threshold_db: f64,
) -> Result<BufferEstimate> {
    let framing = params.framing;
    if buffer.len() < framing.window_len {
        return Err(Error::InvalidConfig(format!(
            "buffer of {} samples is shorter than one {}-sample window",
            buffer.len(),
            framing.window_len
        )));
    }
    let frames_used = (buffer.len() - framing.window_len) / framing.hop_len + 1;
    let covered = (frames_used - 1) * framing.hop_len + framing.window_len;
    let head = Waveform::new(buffer.samples[..covered].to_vec())?;
    let spec = stft(&head, &framing)?;
    debug_assert_eq!(spec.num_frames(), frames_used);
    let features = log_magnitude(&spec);
    let vad = vad_mask(&spec, vad_threshold_db)?;

    let num_bins = framing.num_bins();
    let mut state = LstmState::zeros(params);
    let mut rows = Array2::zeros((frames_used * num_bins, params.embed_dim));
    for t in 0..frames_used {
        let frame_rows = forward_streaming(params, features.row(t), &mut state)?;
        rows.slice_mut(ndarray::s![t * num_bins..(t + 1) * num_bins, ..])
            .assign(&frame_rows);
    }

    let active_rows = gather_active_rows(rows.view(), &vad, num_bins);
    if active_rows.nrows() < kmeans.k {
        return Err(Error::InsufficientEvidence(format!(
            "{} active bins in the buffer, k-means needs at least {}",
            active_rows.nrows(),
            kmeans.k
        )));
    }
    let fit = kmeans_fit(active_rows.view(), kmeans)?;

    let mut between = f64::INFINITY;
    for a in 0..fit.centres.nrows() {
        for b in a + 1..fit.centres.nrows() {
            between = between.min(dist2(fit.centres.row(a), fit.centres.row(b)).sqrt());
        }
    }
    let within = (fit.sse / active_rows.nrows() as f64).sqrt();
    let quality_ratio = if between == 0.0 {
        0.0
    } else if within == 0.0 {
        f64::INFINITY
    } else {
        between / within
    };

    let centres = ClusterCentres::new(
        fit.centres,
        CentreSource::Buffer,
        Some(buffer.len() as f64 * 1000.0 / buffer.sample_rate as f64),
    )?;
    Ok(BufferEstimate {
        centres,
        state,
        quality_ratio,
        active_rows: active_rows.nrows(),
        frames_used,
    })
}

/// Embedding rows whose time-frequency bins pass the activity gate,
/// gathered in row-major (frame, bin) order.
pub fn gather_active_rows(rows: ArrayView2<f64>, vad: &VadMask, num_bins: usize) -> Array2<f64> {
    let active: Vec<usize> = (0..rows.nrows())
        .filter(|&r| vad.active[(r / num_bins, r % num_bins)])
        .collect();
    let mut out = Array2::zeros((active.len(), rows.ncols()));
    for (i, &r) in active.iter().enumerate() {
        out.row_mut(i).assign(&rows.row(r));
    }
    out
}
